"""
Tests for model EDCs, amplitude and decay-time fitting, and RIR synthesis.
"""
import logging

import numpy as np
import pytest
from django.core.exceptions import ValidationError

from analysis.services import DecayAnalysisService
from common_slopes.models import DecayModel, GridSpec, RoomSpec
from common_slopes.services import CommonSlopesService

POSITION = [1.0, 1.0, 1.5]


def to_db(energy):
    return 10 * np.log10(energy)


class TestModelEDC:
    """Test the sum-of-exponentials decay curve"""

    def test_single_slope_start(self, make_model):
        """Test one unit slope starts at 1 - Psi(L)"""
        model = make_model([0.5], [1.0])
        curve = CommonSlopesService.cs_edc(model, POSITION, 0, 4000)
        psi_end = np.exp(-13.8 * 4000 / (0.5 * 8000))
        assert curve[0] == pytest.approx(1.0 - psi_end, rel=1e-12)
        assert curve[-1] > 0

    def test_half_energy_point(self, make_model):
        """Test the kernel is one half at T60 fs ln2 / 13.8"""
        model = make_model([0.5], [1.0])
        n_half = 0.5 * 8000 * np.log(2) / 13.8
        assert model.kernel([n_half])[0, 0, 0] == pytest.approx(0.5, rel=1e-12)

    def test_two_slope_transition(self, make_model):
        """Test the log-domain slope moves from -60/T1 to -60/T2 dB/s"""
        model = make_model([0.2, 1.0], [1.0, 0.01])
        fs = 8000
        curve_db = to_db(CommonSlopesService.cs_edc(model, POSITION, 0, 3 * fs))
        slope = np.gradient(curve_db) * fs
        assert slope[80] == pytest.approx(-60 / 0.2, rel=0.03)
        assert slope[fs] == pytest.approx(-60 / 1.0, rel=0.01)

    def test_non_increasing(self, make_model):
        """Test the curve never rises"""
        model = make_model([0.1, 0.4, 1.5], [0.3, 1.0, 0.02])
        assert np.all(np.diff(CommonSlopesService.cs_edc(model, POSITION, 0, 10000)) <= 0)

    def test_unknown_position(self, make_model):
        """Test a position outside the model is refused"""
        model = make_model([0.5], [1.0])
        with pytest.raises(ValidationError):
            CommonSlopesService.cs_edc(model, [0.0, 0.0, 0.0], 0, 100)

    def test_negative_amplitude_rejected(self):
        """Test amplitudes must be non-negative"""
        with pytest.raises(ValidationError):
            DecayModel([[0.5]], [1000.0], 8000, [POSITION], [[[-1.0]]])

    def test_json_round_trip(self, make_model):
        """Test the model survives its dictionary form"""
        model = make_model([0.3, 1.2], [1.0, 0.05])
        restored = DecayModel.from_dict(model.to_dict())
        np.testing.assert_array_equal(restored.amplitudes, model.amplitudes)
        np.testing.assert_array_equal(restored.t60_table, model.t60_table)


class TestAmplitudeFit:
    """Test non-negative amplitude fitting"""

    def test_round_trip(self, make_model):
        """Test amplitudes generating a reference are recovered"""
        model = make_model([0.3, 1.2], [1.0, 0.05])
        reference = CommonSlopesService.cs_edc(model, POSITION, 0, 16000)
        amplitudes, residuals = CommonSlopesService.fit_amplitudes(reference[None], model.t60_table, 8000)
        np.testing.assert_allclose(amplitudes[:, 0], [1.0, 0.05], rtol=0.01)
        assert residuals[0] < 1e-6

    def test_silent_band(self):
        """Test a zero-energy band fits zero amplitudes"""
        amplitudes, residuals = CommonSlopesService.fit_amplitudes(np.zeros((1, 500)), [[0.3], [1.2]], 8000)
        assert np.all(amplitudes == 0.0)
        assert residuals[0] == 0.0

    def test_single_slope_with_two_slope_basis(self, make_model):
        """Test a single-slope reference puts its energy in the matching slope"""
        model = make_model([0.5], [1.0])
        reference = CommonSlopesService.cs_edc(model, POSITION, 0, 16000)
        amplitudes, _ = CommonSlopesService.fit_amplitudes(reference[None], [[0.5], [2.0]], 8000)
        energy = amplitudes[:, 0] * CommonSlopesService.decay_basis([0.5, 2.0], 8000, 16000)[0]
        assert energy[0] / energy.sum() >= 0.99

    def test_collinear_basis_warns(self, make_model, caplog):
        """Test equal decay times are regularized with a warning"""
        model = make_model([0.5], [1.0])
        reference = CommonSlopesService.cs_edc(model, POSITION, 0, 4000)
        with caplog.at_level(logging.WARNING, logger='common_slopes.services'):
            amplitudes, residuals = CommonSlopesService.fit_amplitudes(reference[None], [[0.5], [0.5]], 8000)
        assert 'ill-conditioned' in caplog.text
        assert np.all(amplitudes >= 0)
        assert amplitudes.sum() == pytest.approx(1.0, rel=0.01)
        assert residuals[0] < 0.01

    def test_band_count_checked(self):
        """Test one reference curve is needed per band"""
        with pytest.raises(ValidationError):
            CommonSlopesService.fit_amplitudes(np.ones((2, 100)), [[0.3], [1.2]], 8000)


class TestDecayTimeFit:
    """Test least-squares common decay times"""

    def test_recovers_generating_times(self):
        """Test two shared decay times are recovered from five positions"""
        fs, length = 8000, 16000
        basis = CommonSlopesService.decay_basis([0.3, 1.2], fs, length)
        amplitudes = np.array([[1.0, 0.01], [0.8, 0.03], [0.5, 0.05], [0.3, 0.08], [0.2, 0.1]])
        edcs = amplitudes @ basis.T
        t60s = CommonSlopesService.fit_common_decay_times(edcs, 2, fs)
        np.testing.assert_allclose(t60s, [0.3, 1.2], rtol=0.02)

    def test_single_slope(self):
        """Test one decay time is fitted to single-exponential curves"""
        edcs = np.array([[1.0], [0.4]]) @ CommonSlopesService.decay_basis([0.7], 8000, 12000).T
        t60s = CommonSlopesService.fit_common_decay_times(edcs, 1, 8000)
        assert t60s[0] == pytest.approx(0.7, rel=0.01)


class TestSynthesis:
    """Test noise-carrier RIR synthesis"""

    def test_silence(self, make_model, broadband_bank):
        """Test zero amplitudes synthesize silence"""
        model = make_model([0.3, 1.0], [0.0, 0.0])
        h = CommonSlopesService.cs_synthesize_rir(model, POSITION, 2000, np.random.default_rng(0), broadband_bank)
        assert np.all(h == 0.0)

    def test_measured_decay_time(self, make_model, broadband_bank):
        """Test a single slope decays with the modelled T60"""
        model = make_model([0.5], [1.0])
        h = CommonSlopesService.cs_synthesize_rir(model, POSITION, 8000, np.random.default_rng(1), broadband_bank)
        _, t60 = DecayAnalysisService.schroeder_decay_slope(DecayAnalysisService.edc(h), 8000)
        assert t60 == pytest.approx(0.5, rel=0.05)

    def test_mean_edc_matches_model(self, make_model, broadband_bank):
        """Test the EDC averaged over ten seeds follows the model within 1 dB RMS"""
        model = make_model([0.2, 0.8], [1.0, 0.05])
        length = 8000
        curves = [
            DecayAnalysisService.energy_decay(
                CommonSlopesService.cs_synthesize_rir(model, POSITION, length, np.random.default_rng(seed),
                                                      broadband_bank)
            )
            for seed in range(10)
        ]
        target_db = to_db(CommonSlopesService.cs_edc(model, POSITION, 0, length))
        n60 = DecayAnalysisService.truncation_index(target_db)
        deviation = to_db(np.mean(curves, axis=0))[:n60] - target_db[:n60]
        assert np.sqrt(np.mean(deviation ** 2)) < 1.0

    def test_reproducible(self, make_model, broadband_bank):
        """Test equal seeds give identical signals"""
        model = make_model([0.3], [1.0])
        first = CommonSlopesService.cs_synthesize_rir(model, POSITION, 1000, np.random.default_rng(3), broadband_bank)
        second = CommonSlopesService.cs_synthesize_rir(model, POSITION, 1000, np.random.default_rng(3), broadband_bank)
        np.testing.assert_array_equal(first, second)

    def test_bank_mismatch(self, make_model, broadband_bank):
        """Test the synthesis bank must have one band per model band"""
        model = make_model([[0.3, 0.2]], [[1.0, 1.0]], band_centers=(500.0, 1000.0))
        with pytest.raises(ValidationError):
            CommonSlopesService.cs_synthesize_rir(model, POSITION, 100, np.random.default_rng(0), broadband_bank)


class TestSyntheticDataset:
    """Test grid datasets synthesized from room amplitude fields"""

    @pytest.fixture
    def coupled_rooms(self):
        def _make(near, far, transition_width=0.0):
            return RoomSpec(
                t60_table=[[0.5], [2.0]],
                band_centers=[1000.0],
                sample_rate=8000,
                near_amplitudes=near,
                far_amplitudes=far,
                boundary_x=0.5,
                transition_width=transition_width,
                rir_length_s=2.5,
            )

        return _make

    def test_constant_field(self, coupled_rooms, broadband_bank):
        """Test a constant field gives identical models and similar energies"""
        room = coupled_rooms([[1.0], [0.05]], [[1.0], [0.05]])
        grid = GridSpec((0.0, 1.0), (0.0, 1.0), 8, 8)
        dataset = CommonSlopesService.make_synthetic_dataset(room, grid, np.random.default_rng(0), broadband_bank)
        assert dataset.num_positions == 64
        assert np.all(np.ptp(dataset.ground_truth.amplitudes, axis=0) == 0.0)
        energies = np.sum(dataset.rirs ** 2, axis=1)
        assert np.all(np.abs(energies / energies.mean() - 1.0) < 0.35)

    def test_amplitude_round_trip(self, coupled_rooms, broadband_bank):
        """Test fitted amplitudes match the generating field"""
        room = coupled_rooms([[1.0], [0.3]], [[1.0], [0.3]])
        grid = GridSpec((0.0, 1.0), (0.0, 1.0), 8, 8)
        dataset = CommonSlopesService.make_synthetic_dataset(room, grid, np.random.default_rng(0), broadband_bank)
        truth = dataset.ground_truth
        exact = [
            CommonSlopesService.fit_amplitudes(
                CommonSlopesService.cs_edc(truth, x, 0, dataset.num_samples)[None], truth.t60_table, 8000
            )[0]
            for x in dataset.receiver_positions[:4]
        ]
        np.testing.assert_allclose(exact, truth.amplitudes[:4], rtol=0.02)

        fitted = CommonSlopesService.fit_dataset(dataset, broadband_bank)
        np.testing.assert_allclose(fitted.amplitudes.mean(axis=0), truth.amplitudes[0], rtol=0.05)

    def test_step_location(self, coupled_rooms, broadband_bank):
        """Test a step in the field shows up in the fitted amplitudes within one cell"""
        room = coupled_rooms([[1.0], [0.01]], [[0.05], [0.5]])
        grid = GridSpec((0.0, 1.0), (0.0, 1.0), 8, 4)
        dataset = CommonSlopesService.make_synthetic_dataset(room, grid, np.random.default_rng(2), broadband_bank)
        fitted = CommonSlopesService.fit_dataset(dataset, broadband_bank)
        slow = fitted.amplitudes[:, 1, 0].reshape(8, 4)
        far_columns = np.flatnonzero(np.median(slow, axis=1) > 0.2)
        assert abs(far_columns[0] - 4) <= 1

    def test_threads_do_not_change_result(self, coupled_rooms, broadband_bank):
        """Test per-position streams make the dataset independent of the worker count"""
        room = coupled_rooms([[1.0], [0.05]], [[0.2], [0.3]], transition_width=0.1)
        grid = GridSpec((0.0, 1.0), (0.0, 0.5), 3, 2)
        one = CommonSlopesService.make_synthetic_dataset(room, grid, np.random.default_rng(4), broadband_bank, 1)
        four = CommonSlopesService.make_synthetic_dataset(room, grid, np.random.default_rng(4), broadband_bank, 4)
        np.testing.assert_array_equal(one.rirs, four.rirs)

    def test_degenerate_grid(self):
        """Test grids with coinciding or missing points are refused"""
        with pytest.raises(ValidationError):
            GridSpec((0.0, 0.0), (0.0, 1.0), 4, 2)
        with pytest.raises(ValidationError):
            GridSpec((0.0, 1.0), (0.0, 1.0), 0, 2)

    def test_sigmoid_blend(self, coupled_rooms):
        """Test a smooth transition is halfway at the boundary"""
        room = coupled_rooms([[1.0], [0.0]], [[0.0], [1.0]], transition_width=0.05)
        field = room.amplitude_field([[0.5, 0.0, 1.5], [2.0, 0.0, 1.5]])
        np.testing.assert_allclose(field[0, :, 0], [0.5, 0.5])
        assert field[1, 1, 0] == pytest.approx(1.0, abs=1e-9)
