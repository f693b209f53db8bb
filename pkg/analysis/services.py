"""
Service layer for energy decay, echo density, colouration and modal analysis.
"""
import json
import logging
import warnings
from pathlib import Path

import numpy as np
import pandas as pd
from django.conf import settings
from django.core.exceptions import ValidationError
from numpy.lib.stride_tricks import sliding_window_view
from scipy.linalg import eig
from scipy.optimize import linear_sum_assignment
from scipy.signal import get_window
from scipy.special import erfc

from filterbank.services import FilterBankService
from freq_domain.services import TransferService
from gfdn_core.models import FeedbackMatrix

from .exceptions import DefectiveEigensystemWarning, UndefinedDecayError
from .models import EnergyDecay, ModalDecomposition, PoleBoundReport

logger = logging.getLogger(__name__)

EDC_FLOOR_DB = -200.0
TRUNCATION_DB = 60.0
MAX_STATE_DIMENSION = 4096
GAUSSIAN_EXCEEDANCE = erfc(1.0 / np.sqrt(2.0))


class DecayAnalysisService:
    """Service for EDC, EDR and NED and the errors built on them"""

    @staticmethod
    def to_db(energy):
        with np.errstate(divide='ignore'):
            return np.maximum(10.0 * np.log10(energy), EDC_FLOOR_DB)

    @staticmethod
    def energy_decay(h):
        """Backward-integrated energy sum_{l >= n} h(l)^2"""
        h = np.asarray(h, dtype=float)
        if h.size == 0:
            raise ValidationError('Cannot compute the decay of an empty signal')
        energy = np.cumsum((h ** 2)[::-1])[::-1]
        if energy[0] == 0.0:
            raise UndefinedDecayError('Energy decay of an all-zero signal is undefined')
        return energy

    @classmethod
    def edc(cls, h):
        return cls.to_db(cls.energy_decay(h))

    @staticmethod
    def truncation_index(edc_ref_db, drop_db=TRUNCATION_DB):
        """Number of leading samples before the reference has decayed by drop_db"""
        below = np.flatnonzero(edc_ref_db <= edc_ref_db[0] - drop_db)
        return max(1, int(below[0])) if below.size else edc_ref_db.size

    @staticmethod
    def _stft_params(fs, window, hop):
        defaults = settings.GFDN
        if window is None:
            window = int(round(defaults['stft_window_ms'] * 1e-3 * fs))
        if hop is None:
            hop = max(1, int(round(window * (1.0 - defaults['stft_overlap']))))
        return int(window), int(hop)

    @staticmethod
    def stft_power(h, window, hop):
        """|STFT|^2 with a Hann window over frames lying fully inside the signal, shape (bins, frames)"""
        h = np.asarray(h, dtype=float)
        if window < hop or hop < 1:
            raise ValidationError(f'Window ({window}) must be at least the hop ({hop}) and the hop positive')
        if h.size < window:
            raise ValidationError(f'Signal of {h.size} samples is shorter than one {window}-sample window')
        frames = sliding_window_view(h, window)[::hop] * get_window('hann', window)
        return np.abs(np.fft.rfft(frames, axis=-1).T) ** 2

    @classmethod
    def edr(cls, h, fs=None, window=None, hop=None):
        """
        Energy decay relief 10 log10(sum_{tau >= j} |STFT(k, tau)|^2).

        Returns the (bins, frames) matrix with the bin frequencies and frame start times.
        """
        fs = fs or settings.GFDN['sample_rate']
        window, hop = cls._stft_params(fs, window, hop)
        power = cls.stft_power(h, window, hop)
        relief = np.cumsum(power[:, ::-1], axis=1)[:, ::-1]
        freqs = np.fft.rfftfreq(window, 1.0 / fs)
        times = np.arange(power.shape[1]) * hop / fs
        return cls.to_db(relief), freqs, times

    @staticmethod
    def ned(h, fs, window_ms=None, hop_ms=None):
        """
        Normalized echo density: per frame, the fraction of samples exceeding
        the frame standard deviation divided by the Gaussian expectation.
        """
        defaults = settings.GFDN
        window_ms = window_ms or defaults['ned_window_ms']
        hop_ms = hop_ms or defaults['ned_hop_ms']
        if window_ms < 10.0:
            raise ValidationError(f'NED window must be at least 10 ms, got {window_ms}')
        window = int(round(window_ms * 1e-3 * fs))
        hop = max(1, int(round(hop_ms * 1e-3 * fs)))
        h = np.asarray(h, dtype=float)
        if h.size < window:
            raise ValidationError(f'Signal of {h.size} samples is shorter than one NED window')

        frames = sliding_window_view(h, window)[::hop]
        std = frames.std(axis=1, keepdims=True)
        exceed = np.mean(np.abs(frames) > std, axis=1)
        density = np.where(std[:, 0] > 0.0, exceed / GAUSSIAN_EXCEEDANCE, 0.0)
        times = (np.arange(frames.shape[0]) * hop + window / 2) / fs
        return density, times

    @classmethod
    def analyze(cls, h, fs, window=None, hop=None):
        edr_db, freqs, times = cls.edr(h, fs, window, hop)
        density, ned_times = cls.ned(h, fs)
        return EnergyDecay(
            sample_rate=fs,
            edc_db=cls.edc(h),
            edr_db=edr_db,
            edr_times=times,
            edr_freqs=freqs,
            ned=density,
            ned_times=ned_times,
        )

    @classmethod
    def edc_error_db(cls, edc_ref_db, edc_hat_db):
        """Mean absolute EDC difference up to the reference's -60 dB point"""
        n60 = cls.truncation_index(edc_ref_db)
        return float(np.mean(np.abs(edc_ref_db[:n60] - edc_hat_db[:n60])))

    @classmethod
    def band_edc_error(cls, h_ref, h_hat, bank, band):
        """EDC error of band ``band`` after identical filtering of both signals"""
        h_ref = np.asarray(h_ref, dtype=float)
        h_hat = np.asarray(h_hat, dtype=float)
        if h_ref.size != h_hat.size:
            raise ValidationError(f'Signals differ in length ({h_ref.size} vs {h_hat.size})')
        ref = FilterBankService.split_band(h_ref, bank, band)
        hat = FilterBankService.split_band(h_hat, bank, band)
        return cls.edc_error_db(cls.edc(ref), cls.edc(hat))

    @classmethod
    def edr_error(cls, h_ref, h_hat, fs=None, window=None, hop=None):
        """Mean absolute EDR difference over bins and frames starting before the reference's -60 dB point"""
        h_ref = np.asarray(h_ref, dtype=float)
        h_hat = np.asarray(h_hat, dtype=float)
        if h_ref.size != h_hat.size:
            raise ValidationError(f'Signals differ in length ({h_ref.size} vs {h_hat.size})')
        fs = fs or settings.GFDN['sample_rate']
        window, hop = cls._stft_params(fs, window, hop)
        edr_ref, _, _ = cls.edr(h_ref, fs, window, hop)
        edr_hat, _, _ = cls.edr(h_hat, fs, window, hop)
        frames = cls.frame_truncation(cls.edc(h_ref), hop, edr_ref.shape[1])
        return float(np.mean(np.abs(edr_ref[:, :frames] - edr_hat[:, :frames])))

    @classmethod
    def frame_truncation(cls, edc_ref_db, hop, num_frames):
        """Number of STFT frames starting before the reference's -60 dB point"""
        n60 = cls.truncation_index(edc_ref_db)
        return int(min(num_frames, max(1, -(-n60 // hop))))

    @staticmethod
    def schroeder_decay_slope(edc_db, fs, start_db=-5.0, stop_db=-35.0):
        """
        Least-squares decay rate (dB/s) of the EDC segment between start_db
        and stop_db below its initial value, and the implied T60.
        """
        relative = edc_db - edc_db[0]
        idx = np.flatnonzero((relative <= start_db) & (relative >= stop_db))
        if idx.size < 2:
            raise ValidationError(f'EDC does not span {start_db} to {stop_db} dB')
        slope, _ = np.polyfit(idx / fs, edc_db[idx], 1)
        return float(slope), float(-60.0 / slope)

    @staticmethod
    def rmse(errors, axis=None):
        return np.sqrt(np.mean(np.square(errors), axis=axis))


class ModalAnalysisService:
    """Service for poles and residues of single-sample state-space realizations"""

    @staticmethod
    def state_space(delays, feedback, line_gains, b, c):
        """
        Transition matrix with one register per delay sample. Each register
        transition carries the per-sample gain of its line, so a lossy
        realization equals gamma times the lossless one when gains are uniform.
        """
        delays = np.asarray(delays, dtype=np.int64)
        total = int(delays.sum())
        if total > MAX_STATE_DIMENSION:
            raise ValidationError(f'State dimension {total} exceeds {MAX_STATE_DIMENSION}')
        first = np.concatenate([[0], np.cumsum(delays)[:-1]])
        last = first + delays - 1

        T = np.zeros((total, total))
        B = np.zeros(total)
        C = np.zeros(total)
        for i, (start, m, gain) in enumerate(zip(first, delays, line_gains)):
            T[first[i], last] = gain * feedback[i]
            idx = np.arange(start + 1, start + m)
            T[idx, idx - 1] = gain
            B[start] = gain * b[i]
            C[last[i]] = c[i]
        return T, B, C

    @staticmethod
    def decompose(T, B, C, groups=0, defect_tol=1e-12):
        """Eigen-decomposition of the realization with residues rho = (C v)(w^H B) / (w^H v) / lambda"""
        poles, left, right = eig(T, left=True, right=True)
        w_h_v = np.einsum('ij,ij->j', left.conj(), right)
        scale = np.linalg.norm(left, axis=0) * np.linalg.norm(right, axis=0)
        defective = np.abs(w_h_v) < defect_tol * scale
        if np.any(defective):
            warnings.warn(
                f'{int(defective.sum())} poles have nearly orthogonal eigenvectors; residues unavailable',
                DefectiveEigensystemWarning,
            )
        with np.errstate(divide='ignore', invalid='ignore'):
            residues = (C @ right) * (left.conj().T @ B) / w_h_v / poles
        residues = np.where(defective, np.nan + 0j, residues)
        return ModalDecomposition(
            poles=poles,
            residues=residues,
            groups=np.broadcast_to(np.asarray(groups), poles.shape).copy(),
            defective=defective,
        )

    @classmethod
    def modal_poles(cls, params, group=None):
        """
        Poles and residues of a network. A block-diagonal network with
        several groups is analysed group by group and the results are joined.
        """
        if group is not None:
            params = params.group(group)
            labels = group
        elif params.topology.num_groups > 1 and params.feedback.kind == FeedbackMatrix.BLOCK_DIAGONAL:
            parts = [cls.modal_poles(params, k) for k in range(params.topology.num_groups)]
            return ModalDecomposition(
                poles=np.concatenate([p.poles for p in parts]),
                residues=np.concatenate([p.residues for p in parts]),
                groups=np.concatenate([p.groups for p in parts]),
                defective=np.concatenate([p.defective for p in parts]),
            )
        else:
            labels = 0 if params.topology.num_groups == 1 else -1

        topology = params.topology
        T, B, C = cls.state_space(
            topology.delay_lengths,
            params.feedback.matrix,
            params.absorption_gains[topology.group_index],
            params.effective_input_gains,
            params.effective_output_gains,
        )
        return cls.decompose(T, B, C, groups=labels)

    @classmethod
    def modal_poles_with_absorption(cls, params, group, filters):
        """
        Poles of a single-group network whose delay lines start with one-pole
        absorption filters v_i(n) = a_i u_i(n) + p_i v_i(n - 1). The first
        register of each line doubles as the filter memory, so the state
        dimension stays sum(m).
        """
        if group is not None:
            params = params.group(group)
        topology = params.topology
        if topology.num_groups != 1:
            raise ValidationError('Absorption-filter analysis expects a single-group network')
        if len(filters) != topology.total_delays:
            raise ValidationError(f'{len(filters)} filters for {topology.total_delays} delay lines')

        feedforward = np.array([f.feedforward for f in filters])
        T, B, C = cls.state_space(
            topology.delay_lengths,
            params.feedback.matrix,
            np.ones(topology.total_delays),
            params.effective_input_gains,
            params.effective_output_gains,
        )
        first = np.concatenate([[0], np.cumsum(topology.delay_lengths)[:-1]])
        T[first] *= feedforward[:, None]
        T[first, first] += [f.pole for f in filters]
        B[first] *= feedforward
        return cls.decompose(T, B, C, groups=0 if group is None else group)

    @staticmethod
    def pair_poles(a, b):
        """Index array p minimizing sum |a[i] - b[p[i]]|"""
        a = np.asarray(a)
        b = np.asarray(b)
        if a.size != b.size:
            raise ValidationError(f'Cannot pair {a.size} poles with {b.size} poles')
        rows, cols = linear_sum_assignment(np.abs(a[:, None] - b[None, :]))
        return cols[np.argsort(rows)]

    @staticmethod
    def band_gain_table(filters, band_edges_hz, fs, points_per_band=512):
        """
        Centre gain and ripple of every filter over every band, both of
        shape (bands, lines). Centre is the midpoint of the extremes.
        """
        band_edges_hz = np.asarray(band_edges_hz, dtype=float)
        gains = np.empty((band_edges_hz.shape[0], len(filters)))
        ripple = np.empty_like(gains)
        for b, (lo, hi) in enumerate(band_edges_hz):
            omega = 2.0 * np.pi * np.linspace(lo, hi, points_per_band) / fs
            for i, f in enumerate(filters):
                magnitude = f.magnitude(omega)
                gains[b, i] = 0.5 * (magnitude.max() + magnitude.min())
                ripple[b, i] = 0.5 * (magnitude.max() - magnitude.min())
        return gains, ripple

    @staticmethod
    def bound_factors(gain, ripple, delay_m):
        """Relative width (1 -/+ delta/gamma) ** (1/m) of the pole band"""
        ratio = np.asarray(ripple, dtype=float) / np.asarray(gain, dtype=float)
        return (1.0 - ratio) ** (1.0 / delay_m), (1.0 + ratio) ** (1.0 / delay_m)

    @staticmethod
    def check_pole_band_bounds(decomp, gain_table, delays, band_edges_hz, fs, ripple=None, tolerance=1e-6):
        """
        Check every pole against the band its angle falls in: its magnitude must
        lie within min_i (gamma_bi - delta_bi) ** (1/m_i) and
        max_i (gamma_bi + delta_bi) ** (1/m_i), where gamma_bi is the per-delay
        gain of line i in band b and delta_bi its ripple.
        """
        gain_table = np.atleast_2d(np.asarray(gain_table, dtype=float))
        ripple = np.zeros_like(gain_table) if ripple is None else np.atleast_2d(np.asarray(ripple, dtype=float))
        delays = np.asarray(delays, dtype=float)
        band_edges_hz = np.atleast_2d(np.asarray(band_edges_hz, dtype=float))
        if gain_table.shape != (band_edges_hz.shape[0], delays.size) or ripple.shape != gain_table.shape:
            raise ValidationError(
                f'Gain table {gain_table.shape} and ripple {ripple.shape} must be (bands, lines) = '
                f'({band_edges_hz.shape[0]}, {delays.size})'
            )

        lower_b = np.min(np.clip(gain_table - ripple, 0.0, None) ** (1.0 / delays), axis=1)
        upper_b = np.max((gain_table + ripple) ** (1.0 / delays), axis=1)
        approx_b = np.mean(gain_table ** (1.0 / delays), axis=1)

        freqs = np.abs(decomp.frequencies) * fs / (2.0 * np.pi)
        bands = np.clip(np.searchsorted(band_edges_hz[:, 0], freqs, side='right') - 1, 0, band_edges_hz.shape[0] - 1)
        return PoleBoundReport(
            magnitudes=decomp.magnitudes,
            bands=bands,
            lower=lower_b[bands],
            upper=upper_b[bands],
            approximation=approx_b[bands],
            tolerance=tolerance,
        )


class SpectralAnalysisService:
    """Service for the colouration of trained group responses"""

    @staticmethod
    def offset_angles(num_points):
        """Half-circle angles 2 pi (q + 1/2) / Q, q = 0..Q/2 - 1"""
        return 2.0 * np.pi * (np.arange(num_points // 2) + 0.5) / num_points

    @classmethod
    def group_magnitude_response(cls, network_bank, group, octave_bank, num_points):
        """
        |sum_b H_kb(e^jw) G_b(e^jw)|^2 with lossless group prototypes H_kb, on
        the half-bin offset grid so no lossless pole can sit on a sample point.
        """
        if network_bank.num_bands != octave_bank.num_bands:
            raise ValidationError('Network bank and filter bank cover different bands')
        if num_points < octave_bank.num_taps:
            raise ValidationError(f'{num_points} points cannot hold {octave_bank.num_taps} taps')
        angles = cls.offset_angles(num_points)
        filters = np.fft.rfft(octave_bank.taps, n=2 * num_points, axis=-1)[:, 1::2][:, :angles.size]
        total = np.zeros(angles.size, dtype=complex)
        for b, params in enumerate(network_bank.networks):
            total += TransferService.eval_group_responses(params, angles, lossless=True)[group] * filters[b]
        freqs = angles * network_bank.sample_rate / (2.0 * np.pi)
        return freqs, np.abs(total) ** 2

    @staticmethod
    def response_deviation_db(freqs, magnitude, f_lo=None, f_hi=None):
        """Standard deviation of the dB magnitude between f_lo and f_hi"""
        mask = np.ones(freqs.size, dtype=bool)
        if f_lo is not None:
            mask &= freqs >= f_lo
        if f_hi is not None:
            mask &= freqs <= f_hi
        return float(np.std(10.0 * np.log10(np.maximum(magnitude[mask], 1e-20))))


class AnalysisExportService:
    """Service for writing metric curves and summaries"""

    @staticmethod
    def write_csv(path, frame, config_hash=''):
        """Table as CSV; a non-empty hash is written as a trailing config_hash column"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        frame = pd.DataFrame(frame)
        if config_hash:
            frame = frame.assign(config_hash=config_hash)
        frame.to_csv(path, index=False, float_format='%.10g')
        logger.info(f"Wrote {path}")
        return path

    @classmethod
    def write_decay_curves(cls, directory, decay, prefix='', config_hash=''):
        directory = Path(directory)
        cls.write_csv(directory / f'{prefix}edc.csv',
                      {'time_s': decay.edc_times, 'edc_db': decay.edc_db}, config_hash)
        if decay.edr_db is not None:
            k, j = np.meshgrid(decay.edr_freqs, decay.edr_times, indexing='ij')
            cls.write_csv(directory / f'{prefix}edr.csv',
                          {'freq_hz': k.ravel(), 'time_s': j.ravel(), 'edr_db': decay.edr_db.ravel()}, config_hash)
        if decay.ned is not None:
            cls.write_csv(directory / f'{prefix}ned.csv',
                          {'time_s': decay.ned_times, 'ned': decay.ned}, config_hash)

    @staticmethod
    def summarize(errors):
        """
        RMSE per band and per position of a long-format error table with
        columns position, band and error_db.
        """
        frame = pd.DataFrame(errors)
        rmse = lambda s: float(np.sqrt(np.mean(np.square(s))))
        return {
            'per_band': {str(k): rmse(v) for k, v in frame.groupby('band')['error_db']},
            'per_position': {str(k): rmse(v) for k, v in frame.groupby('position')['error_db']},
            'overall': rmse(frame['error_db']),
        }

    @staticmethod
    def write_json(path, summary, config_hash=''):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        document = dict(summary)
        if config_hash:
            document['config_hash'] = config_hash
        path.write_text(json.dumps(document, indent=2, sort_keys=True), encoding='utf-8')
        return path
