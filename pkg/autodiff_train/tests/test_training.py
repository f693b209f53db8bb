"""
Tests for the subband forward pass, gradient flow and the training loop.
"""
from types import SimpleNamespace

import numpy as np
import pytest
from django.core.exceptions import ValidationError

from autodiff_train.exceptions import TrainingDivergedError
from autodiff_train.losses import LossService
from autodiff_train.models import LAYER_NORM_EPS
from autodiff_train.services import MLP_PREFIX, TrainingService
from autodiff_train.tape import Tape
from filterbank.services import FilterBankService
from freq_domain.models import FrequencyGrid
from freq_domain.services import TransferService
from gfdn_core.models import GroupTopology
from gfdn_core.services import GFDNService


@pytest.fixture
def band_setup(tiny_config, tiny_dataset):
    """Factory returning (model, problem) for one band of the tiny dataset"""

    def _make(band=1, **overrides):
        config = tiny_config(**overrides)
        fs = tiny_dataset.sample_rate
        bank = FilterBankService.design_bank(fs, config.num_bands, config.fir_order, config.band_base_hz)
        q = TransferService.choose_Q(tiny_dataset.t60_table.max(), fs)
        topology = GroupTopology(config.num_groups, config.delays_per_group, config.delay_lengths)
        gains = GFDNService.t60_to_absorption_gain(tiny_dataset.t60_table[:, band], 1, fs)
        problem = TrainingService.band_problem(
            band, TrainingService.fit_length(tiny_dataset.rirs, q), tiny_dataset.receiver_positions,
            tiny_dataset.source_position, bank, topology, gains, q, config,
        )
        model = TrainingService.initialize_band(config, topology, bank.center_freqs[band], band)
        return model, problem

    return _make


class TestGainNormalization:
    """Test unit-energy rescaling of input and output gains"""

    def test_unit_lossless_energy(self):
        """Test every lossless group response ends up with unit mean energy"""
        params = GFDNService.random_network(2, 3, 8000, [0.1, 0.2], np.random.default_rng(6))
        normalized = TrainingService.normalize_io_gains(params, 256)
        responses = TransferService.eval_group_responses(normalized, TransferService.full_circle_angles(256),
                                                         lossless=True)
        np.testing.assert_allclose(np.mean(np.abs(responses) ** 2, axis=-1), 1.0, rtol=1e-10)

    def test_common_factor_per_group(self):
        """Test b_k and c_k of a group are scaled by the same factor"""
        params = GFDNService.random_network(2, 3, 8000, [0.1, 0.2], np.random.default_rng(6))
        normalized = TrainingService.normalize_io_gains(params, 256)
        b_ratio = normalized.input_gains / params.input_gains
        c_ratio = normalized.output_gains / params.output_gains
        np.testing.assert_allclose(b_ratio, c_ratio)
        np.testing.assert_allclose(b_ratio[:3], b_ratio[0])
        np.testing.assert_allclose(b_ratio[3:], b_ratio[3])

    def test_silent_group_rejected(self):
        """Test a group with zero input gains cannot be normalized"""
        params = GFDNService.random_network(2, 3, 8000, [0.1, 0.2], np.random.default_rng(6))
        silent = params.input_gains.copy()
        silent[3:] = 0.0
        params = GFDNService.make_params(params.topology, params.feedback, silent, params.output_gains,
                                         params.absorption_gains)
        with pytest.raises(ValidationError):
            TrainingService.normalize_io_gains(params, 256)


class TestBandProblem:
    """Test the precomputed inputs of one band"""

    def test_shapes(self, band_setup):
        """Test reference curves and system matrices have the training layout"""
        _, problem = band_setup()
        assert problem.num_points == 256
        assert problem.output_length == 272
        assert problem.edc_refs.shape == (8, 272)
        assert problem.edr_refs.shape == (8, 33, 14)
        assert problem.half_systems.shape == (2, 129, 2, 2)
        assert problem.spectral_systems.shape == (2, 256, 2, 2)
        assert np.all((problem.edr_frames >= 1) & (problem.edr_frames <= 14))

    def test_window_longer_than_response(self, band_setup):
        """Test an STFT window beyond the band responses is refused"""
        with pytest.raises(ValidationError):
            band_setup(stft_window_ms=40.0)

    def test_deterministic_initialization(self, band_setup):
        """Test the same seed and band give the same initial state"""
        first, _ = band_setup()
        second, _ = band_setup()
        np.testing.assert_array_equal(first.generators, second.generators)
        np.testing.assert_array_equal(first.mlp.parameters['output.weight'], second.mlp.parameters['output.weight'])
        assert np.all(np.abs(first.input_gains) <= 0.25)


def _smooth_entries(model, problem, batch, step=1e-4):
    """
    Parameter entries whose finite-difference shifts leave every ReLU of the
    MLP on the same side for the batch positions. Generators contribute their
    strictly upper triangle only.
    """
    params = TrainingService.band_parameters(model)
    mlp = model.mlp
    codes = problem.receiver_codes[list(batch)]
    if problem.learn_source_gains:
        codes = np.vstack([codes, problem.source_code[None, :]])

    def active(values):
        h, pattern = codes, []
        for layer in range(mlp.hidden_layers):
            prefix = f'{MLP_PREFIX}hidden.{layer}.'
            z = h @ values[prefix + 'weight'] + values[prefix + 'bias']
            z = z - z.mean(axis=-1, keepdims=True)
            z = z / np.sqrt(np.mean(z ** 2, axis=-1, keepdims=True) + LAYER_NORM_EPS)
            z = z * values[prefix + 'norm_gain'] + values[prefix + 'norm_bias']
            pattern.append(z > 0)
            h = np.maximum(z, 0.0)
        return pattern

    reference = active(params)
    n = model.generators.shape[-1]
    upper = np.broadcast_to(np.triu(np.ones((n, n), dtype=bool), 1), model.generators.shape)

    entries = []
    for name, value in params.items():
        for i in range(np.size(value)):
            if name == 'generators' and not upper.flat[i]:
                continue
            if name.startswith(MLP_PREFIX + 'hidden.'):
                h = step * max(1.0, abs(float(np.ravel(value)[i])))
                stable = True
                for k in (-2, -1, 1, 2):
                    trial = dict(params, **{name: np.array(value, dtype=float)})
                    trial[name].flat[i] += k * h
                    if any(not np.array_equal(a, b) for a, b in zip(active(trial), reference)):
                        stable = False
                        break
                if not stable:
                    continue
            entries.append((name, i))
    return entries


class TestGradients:
    """Test reverse-mode gradients of the full band objective"""

    @pytest.mark.parametrize('learn_source_gains', [False, True])
    def test_against_finite_differences(self, band_setup, learn_source_gains):
        """Test 24 random parameter entries against central differences to 1e-4"""
        model, problem = band_setup(edc_mask_prob=0.5, learn_source_gains=learn_source_gains)
        batch = [0, 3, 5]
        objective = TrainingService.band_objective(model, problem, batch=batch)
        entries = _smooth_entries(model, problem, batch)
        report = TrainingService.check_gradients(objective, TrainingService.band_parameters(model), num_checks=24,
                                                 rng=np.random.default_rng(9), entries=entries)
        assert len(report) == 24
        assert np.all(report['relative_error'] < 1e-4), report.sort_values('relative_error').tail(3)

    def test_group_spectral_loss_isolated(self, band_setup):
        """Test a group's flatness loss has exactly zero gradient in every other group's W, b and c"""
        model, problem = band_setup()
        g, n = model.input_gains.shape
        for k in range(g):
            tape = Tape()
            leaves = [tape.variable(model.generators), tape.variable(model.input_gains),
                      tape.variable(model.output_gains)]
            mixing = tape.expm(tape.skew(leaves[0]))
            feedback = tape.reshape(mixing @ mixing, (g, 1, n, n))
            states = tape.solve(problem.spectral_systems - feedback, tape.reshape(leaves[1], (g, 1, n)))
            lossless = tape.sum(states * tape.reshape(leaves[2], (g, 1, n)), axis=-1)
            per_group = LossService.loss_spectral(tape, lossless)
            grads = tape.gradients({per_group: np.eye(g)[k]}, leaves)
            for grad in grads:
                others = np.delete(np.asarray(grad), k, axis=0)
                assert np.all(others == 0.0)
                assert np.any(np.asarray(grad)[k] != 0.0)

    def test_worker_count_does_not_change_result(self, band_setup):
        """Test item gradients reduce identically on one or several threads"""
        model, problem = band_setup()
        terms_1, grads_1 = TrainingService.band_loss_and_gradients(model, problem, [1, 2, 4, 7], 0, workers=1)
        terms_3, grads_3 = TrainingService.band_loss_and_gradients(model, problem, [1, 2, 4, 7], 0, workers=3)
        assert terms_1 == terms_3
        for name in grads_1:
            np.testing.assert_array_equal(grads_1[name], grads_3[name])

    def test_terms(self, band_setup):
        """Test the reported total combines the weighted terms"""
        model, problem = band_setup()
        terms, _ = TrainingService.band_loss_and_gradients(model, problem, [0, 1], 0)
        expected = 10.0 * terms['edc'] + terms['edr'] + terms['spectral'] + terms['sparsity']
        assert terms['total'] == pytest.approx(expected)
        assert 0.0 <= terms['sparsity'] <= 2.0


class TestTraining:
    """Test the per-band training loop"""

    def test_zero_epochs_keep_initialization(self, tiny_config, tiny_dataset):
        """Test training for zero epochs returns the initial state unchanged"""
        result = TrainingService.train(tiny_dataset, tiny_config(), workers=1)
        assert result.history.empty
        for trained, initial in zip(result.bands, result.initial_bands):
            np.testing.assert_array_equal(trained.generators, initial.generators)
            np.testing.assert_array_equal(trained.input_gains, initial.input_gains)
        assert [b.center_hz for b in result.bands] == [500.0, 1000.0]

    def test_one_step_per_band(self, tiny_config, tiny_dataset):
        """Test a single full-batch epoch takes one normalized step per band"""
        result = TrainingService.train(tiny_dataset, tiny_config(epochs=1, batch_size=8), workers=1)
        assert list(result.history['band']) == [0, 1]
        assert np.all(np.isfinite(result.history['total']))
        for band in range(2):
            assert not np.array_equal(result.bands[band].generators, result.initial_bands[band].generators)
            responses = TransferService.eval_group_responses(
                result.band_params(band), TransferService.full_circle_angles(result.num_points), lossless=True
            )
            np.testing.assert_allclose(np.mean(np.abs(responses) ** 2, axis=-1), 1.0, rtol=1e-9)

    def test_table_shape_checked(self, tiny_config, tiny_dataset):
        """Test the decay-time table must be groups x bands"""
        tiny_dataset.t60_table = np.array([[0.03, 0.025, 0.02]])
        with pytest.raises(ValidationError):
            TrainingService.train(tiny_dataset, tiny_config(), workers=1)

    def test_divergence_reported(self, tiny_config, tiny_dataset, monkeypatch):
        """Test a non-finite loss stops training with its location"""
        monkeypatch.setattr(LossService, 'total_loss', staticmethod(lambda *args: float('nan')))
        with pytest.raises(TrainingDivergedError) as excinfo:
            TrainingService.train(tiny_dataset, tiny_config(epochs=1), workers=1)
        assert (excinfo.value.band, excinfo.value.epoch, excinfo.value.step) == (0, 0, 0)
        assert excinfo.value.last_finite_loss is None

    @pytest.mark.slow
    def test_loss_decreases(self, tiny_config, tiny_dataset):
        """Test the mean loss of the last epoch is below that of the second"""
        config = tiny_config(epochs=12, learning_rate=2e-2)
        result = TrainingService.train(tiny_dataset, config, workers=2)
        means = result.history.groupby('epoch')['total'].mean()
        assert means.iloc[-1] < means.iloc[1]

    @pytest.mark.slow
    def test_constant_target_gives_constant_gains(self, tiny_config):
        """Test one group fitted to the same response everywhere learns receiver gains equal within 5 %"""
        fs, t60 = 8000, 0.1
        config = tiny_config(num_groups=1, delays_per_group=4, delay_lengths=(37, 53, 71, 97), num_bands=1,
                             band_base_hz=1000.0, fir_order=64, epochs=300, batch_size=8, learning_rate=5e-3)
        q = TransferService.choose_Q(t60, fs)
        topology = GroupTopology(1, 4, config.delay_lengths)
        model = TrainingService.initialize_band(config, topology, 1000.0, 0)
        gains = GFDNService.t60_to_absorption_gain(np.array([t60]), 1, fs)
        params = TrainingService.normalize_io_gains(model.to_params(topology, gains), q)
        grid = FrequencyGrid(num_points=q, sample_rate=fs)
        h = TransferService.response_to_rir(TransferService.eval_transfer(params, grid))

        rng = np.random.default_rng(3)
        dataset = SimpleNamespace(
            sample_rate=fs,
            source_position=np.array([0.2, 0.2, 1.5]),
            receiver_positions=np.column_stack([rng.uniform(0.0, 2.0, (8, 2)), np.full(8, 1.5)]),
            rirs=np.tile(1.5 * h, (8, 1)),
            t60_table=np.array([[t60]]),
        )
        result = TrainingService.train(dataset, config, workers=2)
        learned = np.abs([TrainingService.position_gains(result, 0, x)[1][0] for x in dataset.receiver_positions])
        np.testing.assert_allclose(learned, np.median(learned), rtol=0.05)


class TestPrediction:
    """Test inference from a trained result"""

    def test_matches_training_forward(self, tiny_config, tiny_dataset, band_setup):
        """Test predicted band responses equal what the losses see"""
        result = TrainingService.train(tiny_dataset, tiny_config(), workers=1)
        predicted = TrainingService.predict_band_rirs(result, tiny_dataset.receiver_positions[2])
        assert predicted.shape == (2, 272)
        for band in range(2):
            model, problem = band_setup(band=band)
            responses, _, _ = TrainingService.band_forward(Tape(), model.generators, model.input_gains,
                                                           model.output_gains, problem)
            weights = TrainingService.mlp_forward(problem.receiver_codes[2], model.mlp)
            np.testing.assert_allclose(predicted[band], weights @ responses.value, atol=1e-9)

    def test_fixed_source_gains(self, tiny_config, tiny_dataset):
        """Test source gains stay at one unless they are learned"""
        result = TrainingService.train(tiny_dataset, tiny_config(), workers=1)
        g_i, g_o = TrainingService.position_gains(result, 0, tiny_dataset.receiver_positions[0])
        assert np.all(g_i == 1.0)
        assert g_o.shape == (2,)

    def test_learned_source_gains(self, tiny_config, tiny_dataset):
        """Test learned source gains come from the MLP at the source position"""
        result = TrainingService.train(tiny_dataset, tiny_config(learn_source_gains=True), workers=1)
        g_i, _ = TrainingService.position_gains(result, 0, tiny_dataset.receiver_positions[0])
        code = TrainingService.encode_position(tiny_dataset.source_position, result.config.encoder)
        np.testing.assert_array_equal(g_i, TrainingService.mlp_forward(code, result.bands[0].mlp))

    def test_network_for_position(self, tiny_config, tiny_dataset):
        """Test a position-specific network carries the predicted gains"""
        result = TrainingService.train(tiny_dataset, tiny_config(), workers=1)
        params = TrainingService.network_for_position(result, 1, tiny_dataset.receiver_positions[4])
        _, g_o = TrainingService.position_gains(result, 1, tiny_dataset.receiver_positions[4])
        np.testing.assert_array_equal(params.receiver_gains, g_o)
