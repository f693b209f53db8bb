"""
Service layer for positional encoding, the differentiable subband forward
pass and the training loop.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd
from django.conf import settings
from django.core.exceptions import ValidationError

from analysis.services import DecayAnalysisService
from filterbank.services import FilterBankService
from freq_domain.exceptions import SingularTransferError
from freq_domain.services import TransferService
from gfdn_core.models import GroupTopology
from gfdn_core.services import GFDNService

from .exceptions import TrainingDivergedError
from .losses import LossService
from .models import LAYER_NORM_EPS, BandModel, PerBandMLP, TrainingResult
from .optim import Adam
from .tape import Tape

logger = logging.getLogger(__name__)

MLP_PREFIX = 'mlp.'


def _diagonal_stack(diagonals):
    """(..., n) -> (..., n, n) with the entries on the diagonal"""
    n = diagonals.shape[-1]
    out = np.zeros(diagonals.shape + (n,), dtype=diagonals.dtype)
    idx = np.arange(n)
    out[..., idx, idx] = diagonals
    return out


@dataclass(frozen=True)
class BandProblem:
    """Constant inputs of one band's optimization: references, grids and loss settings"""

    band: int
    topology: GroupTopology
    absorption_gains: np.ndarray
    num_points: int
    nfft: int
    output_length: int
    filter_spectrum: np.ndarray
    half_systems: np.ndarray
    spectral_systems: np.ndarray
    receiver_codes: np.ndarray
    source_code: np.ndarray
    edc_refs: np.ndarray
    edr_refs: np.ndarray
    edr_frames: np.ndarray
    window: int
    hop: int
    weights: object
    mask_prob: float
    learn_source_gains: bool
    seed: int

    @property
    def num_positions(self):
        return self.receiver_codes.shape[0]


class TrainingService:
    """Service for training one frequency-independent network per octave band"""

    @staticmethod
    def encode_position(x, encoder):
        """
        [sin(pi l_n x_d) for n, d] followed by the matching cosines, for one
        position (3,) or a batch (P, 3).
        """
        x = np.asarray(x, dtype=float)
        if x.shape[-1:] != (3,):
            raise ValidationError(f'Positions must be 3-D, got shape {x.shape}')
        if not np.all(np.isfinite(x)):
            raise ValidationError('Positions must be finite')
        phases = np.pi * encoder.frequencies[:, None] * x[..., None, :]
        flat = phases.reshape(x.shape[:-1] + (-1,))
        return np.concatenate([np.sin(flat), np.cos(flat)], axis=-1)

    @staticmethod
    def mlp_graph(tape, x, params, mlp):
        """Record the MLP on ``tape`` for row inputs x (P, D); ``params`` may hold Variables or arrays"""
        if np.shape(x)[-1] != mlp.input_dim:
            raise ValidationError(f'MLP expects {mlp.input_dim} inputs, got {np.shape(x)[-1]}')
        h = x
        for layer in range(mlp.hidden_layers):
            prefix = f'hidden.{layer}.'
            h = tape.matmul(h, params[prefix + 'weight']) + params[prefix + 'bias']
            centered = h - tape.mean(h, axis=-1, keepdims=True)
            variance = tape.mean(tape.square(centered), axis=-1, keepdims=True)
            h = centered / tape.sqrt(variance + LAYER_NORM_EPS)
            h = tape.relu(h * params[prefix + 'norm_gain'] + params[prefix + 'norm_bias'])
        return tape.matmul(h, params['output.weight']) + params['output.bias']

    @classmethod
    def mlp_forward(cls, enc_x, mlp):
        """Gains for encoded positions, shape (P, output_dim) or (output_dim,) for a single row"""
        enc_x = np.asarray(enc_x, dtype=float)
        out = cls.mlp_graph(Tape(), np.atleast_2d(enc_x), mlp.parameters, mlp).value
        return out[0] if enc_x.ndim == 1 else out

    @staticmethod
    def normalize_io_gains(params, num_points):
        """
        Rescale b_k and c_k of every group by a common factor so the lossless
        group response has unit mean energy on the offset full-circle grid.
        """
        angles = TransferService.full_circle_angles(num_points)
        energy = np.mean(np.abs(TransferService.eval_group_responses(params, angles, lossless=True)) ** 2, axis=-1)
        if np.any(energy <= 0.0) or not np.all(np.isfinite(energy)):
            raise ValidationError(f'Cannot normalize groups with energies {energy.tolist()}')
        scale = (energy ** -0.25)[params.topology.group_index]
        return replace(params, input_gains=params.input_gains * scale, output_gains=params.output_gains * scale)

    @staticmethod
    def fit_length(rirs, length):
        """Zero-pad or truncate every row to ``length`` samples"""
        rirs = np.atleast_2d(np.asarray(rirs, dtype=float))
        out = np.zeros((rirs.shape[0], length))
        n = min(length, rirs.shape[1])
        out[:, :n] = rirs[:, :n]
        return out

    @staticmethod
    def stft_shape(fs, config):
        window = int(round(config.stft_window_ms * 1e-3 * fs))
        return window, max(1, int(round(window * (1.0 - config.stft_overlap))))

    @classmethod
    def band_problem(cls, band, references, receivers, source, bank, topology, absorption_gains,
                     num_points, config):
        """Precompute everything that stays fixed while band ``band`` trains"""
        fs = bank.sample_rate
        output_length = num_points + bank.fir_order
        nfft = 1 << int(np.ceil(np.log2(output_length)))
        window, hop = cls.stft_shape(fs, config)
        if window > output_length:
            raise ValidationError(f'STFT window of {window} samples exceeds the {output_length}-sample responses')

        band_refs = np.stack([FilterBankService.split_band(ref, bank, band) for ref in references])
        edc_refs = np.stack([DecayAnalysisService.edc(ref) for ref in band_refs])
        edr_refs = np.stack([DecayAnalysisService.edr(ref, fs, window, hop)[0] for ref in band_refs])
        edr_frames = np.array([
            DecayAnalysisService.frame_truncation(edc, hop, edr_refs.shape[-1]) for edc in edc_refs
        ])

        delays = topology.delay_lengths.reshape(topology.num_groups, topology.delays_per_group).astype(float)
        half = 2.0 * np.pi * np.arange(num_points // 2 + 1) / num_points
        gains = np.asarray(absorption_gains, dtype=float)[:, None, None] ** -delays[:, None, :]
        half_systems = _diagonal_stack(np.exp(1j * half[None, :, None] * delays[:, None, :]) * gains)
        full = TransferService.full_circle_angles(num_points)
        spectral_systems = _diagonal_stack(np.exp(1j * full[None, :, None] * delays[:, None, :]))

        return BandProblem(
            band=band,
            topology=topology,
            absorption_gains=np.asarray(absorption_gains, dtype=float),
            num_points=num_points,
            nfft=nfft,
            output_length=output_length,
            filter_spectrum=np.fft.rfft(bank.taps[band], n=nfft),
            half_systems=half_systems,
            spectral_systems=spectral_systems,
            receiver_codes=cls.encode_position(receivers, config.encoder),
            source_code=cls.encode_position(source, config.encoder),
            edc_refs=edc_refs,
            edr_refs=edr_refs,
            edr_frames=edr_frames,
            window=window,
            hop=hop,
            weights=config.loss_weights,
            mask_prob=config.edc_mask_prob,
            learn_source_gains=config.learn_source_gains,
            seed=config.seed,
        )

    @staticmethod
    def initialize_band(config, topology, center_hz, band):
        """W ~ U[+-1/sqrt(N)], b and c ~ U[+-1/N], He-initialized MLP, seeded by (seed, band)"""
        rng = np.random.default_rng([config.seed, band])
        g, n_group, n = topology.num_groups, topology.delays_per_group, topology.total_delays
        layers, width = PerBandMLP.schedule_for(center_hz, config.mlp_schedule)
        return BandModel(
            center_hz=float(center_hz),
            generators=rng.uniform(-1.0 / np.sqrt(n), 1.0 / np.sqrt(n), (g, n_group, n_group)),
            input_gains=rng.uniform(-1.0 / n, 1.0 / n, (g, n_group)),
            output_gains=rng.uniform(-1.0 / n, 1.0 / n, (g, n_group)),
            mlp=PerBandMLP.initialize(config.encoder.output_dim, layers, width, g, rng),
        )

    @staticmethod
    def band_parameters(model):
        params = {
            'generators': model.generators,
            'input_gains': model.input_gains,
            'output_gains': model.output_gains,
        }
        params.update({MLP_PREFIX + k: v for k, v in model.mlp.parameters.items()})
        return params

    @staticmethod
    def with_band_parameters(model, params):
        mlp_params = {k[len(MLP_PREFIX):]: v for k, v in params.items() if k.startswith(MLP_PREFIX)}
        return BandModel(
            center_hz=model.center_hz,
            generators=np.array(params['generators'], dtype=float),
            input_gains=np.array(params['input_gains'], dtype=float),
            output_gains=np.array(params['output_gains'], dtype=float),
            mlp=model.mlp.with_parameters(mlp_params),
        )

    @staticmethod
    def band_forward(tape, generators, input_gains, output_gains, problem):
        """
        Band-filtered group responses Y (G, Q + order) of the lossy network, and
        the summed spectral and sparsity losses of the lossless prototypes.
        """
        g, n = problem.topology.num_groups, problem.topology.delays_per_group
        mixing = tape.expm(tape.skew(generators))
        feedback = tape.reshape(mixing @ mixing, (g, 1, n, n))
        b = tape.reshape(input_gains, (g, 1, n))
        c = tape.reshape(output_gains, (g, 1, n))

        states = tape.solve(problem.half_systems - feedback, b)
        responses = tape.sum(states * c, axis=-1)
        h = tape.irfft(responses, problem.num_points)
        filtered = tape.irfft(tape.rfft(h, problem.nfft) * problem.filter_spectrum, problem.nfft)
        band_responses = filtered[:, :problem.output_length]

        lossless = tape.sum(tape.solve(problem.spectral_systems - feedback, b) * c, axis=-1)
        spectral = tape.sum(LossService.loss_spectral(tape, lossless))
        sparsity = tape.sum(LossService.loss_sparsity(tape, mixing))
        return band_responses, spectral, sparsity

    @classmethod
    def position_weights(cls, tape, params, mlp, receiver_code, source_code, learn_source_gains):
        """Per-group weights g_i * g_o of one position, shape (G,)"""
        g_o = cls.mlp_graph(tape, receiver_code[None, :], params, mlp)
        if learn_source_gains:
            g_o = g_o * cls.mlp_graph(tape, source_code[None, :], params, mlp)
        return tape.reshape(g_o, (mlp.output_dim,))

    @classmethod
    def item_loss(cls, problem, band_responses, mlp, position, batch_size, step, item):
        """EDC and EDR losses of one batch item on its own tape, with gradients for Y and the MLP"""
        tape = Tape()
        Y = tape.variable(band_responses)
        names = list(mlp.parameters)
        params = {name: tape.variable(mlp.parameters[name]) for name in names}
        weights = cls.position_weights(tape, params, mlp, problem.receiver_codes[position],
                                       problem.source_code, problem.learn_source_gains)
        y_hat = tape.sum(tape.reshape(weights, (-1, 1)) * Y, axis=0)

        rng = np.random.default_rng([problem.seed, problem.band, step, item])
        edc = LossService.loss_edc(tape, problem.edc_refs[position], y_hat, problem.mask_prob, rng)
        edr = LossService.loss_edr(tape, problem.edr_refs[position], y_hat, problem.window, problem.hop,
                                   problem.edr_frames[position])
        objective = (problem.weights.edc * edc + problem.weights.edr * edr) / float(batch_size)
        grads = tape.backward(objective, [Y] + [params[name] for name in names])
        return float(edc.value), float(edr.value), grads[0], dict(zip(names, grads[1:]))

    @classmethod
    def band_loss_and_gradients(cls, model, problem, batch, step, workers=1):
        """
        Loss terms and gradients of one batch. The shared tape holds the group
        responses and the per-group losses; each item runs on its own tape and
        the item gradients are reduced in item order before the shared sweep.
        """
        tape = Tape()
        W = tape.variable(model.generators)
        b = tape.variable(model.input_gains)
        c = tape.variable(model.output_gains)
        try:
            Y, spectral, sparsity = cls.band_forward(tape, W, b, c, problem)
        except np.linalg.LinAlgError:
            logger.error(f"Singular system in band {problem.band} at step {step}", exc_info=True)
            raise SingularTransferError(float('nan'))

        batch = list(batch)

        def run(args):
            item, position = args
            return cls.item_loss(problem, Y.value, model.mlp, position, len(batch), step, item)

        with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
            results = list(executor.map(run, enumerate(batch)))

        grad_y = np.zeros_like(Y.value)
        mlp_grads = {name: np.zeros_like(value) for name, value in model.mlp.parameters.items()}
        for _, _, g_y, g_mlp in results:
            grad_y = grad_y + g_y
            for name in mlp_grads:
                mlp_grads[name] = mlp_grads[name] + g_mlp[name]

        weights = problem.weights
        shared = weights.spectral * spectral + weights.sparsity * sparsity
        g_w, g_b, g_c = tape.gradients({Y: grad_y, shared: 1.0}, [W, b, c])

        edc_terms = [r[0] for r in results]
        edr_terms = [r[1] for r in results]
        terms = {
            'total': float(LossService.total_loss(weights, edc_terms, edr_terms,
                                                  float(spectral.value), float(sparsity.value))),
            'edc': float(np.mean(edc_terms)),
            'edr': float(np.mean(edr_terms)),
            'spectral': float(spectral.value),
            'sparsity': float(sparsity.value),
        }
        grads = {'generators': g_w, 'input_gains': g_b, 'output_gains': g_c}
        grads.update({MLP_PREFIX + k: v for k, v in mlp_grads.items()})
        return terms, grads

    @classmethod
    def band_objective(cls, model, problem, batch, step=0):
        """Closure mapping a parameter dict to (total loss, gradients) for gradient checks"""

        def objective(params):
            terms, grads = cls.band_loss_and_gradients(cls.with_band_parameters(model, params), problem, batch, step)
            return terms['total'], grads

        return objective

    @classmethod
    def normalize_band(cls, model, problem):
        params = cls.normalize_io_gains(model.to_params(problem.topology, problem.absorption_gains),
                                        problem.num_points)
        shape = model.input_gains.shape
        return replace(model, input_gains=params.input_gains.reshape(shape),
                       output_gains=params.output_gains.reshape(shape))

    @classmethod
    def train_band(cls, model, problem, config, workers=1):
        """Adam over shuffled batches for ``config.epochs`` epochs, normalizing b and c after every step"""
        optimizer = Adam(config.learning_rate, config.betas, config.adam_eps)
        rows = []
        step = 0
        last_finite = None
        for epoch in range(config.epochs):
            order = np.random.default_rng([config.seed, problem.band, epoch]).permutation(problem.num_positions)
            for start in range(0, order.size, config.batch_size):
                batch = order[start:start + config.batch_size]
                terms, grads = cls.band_loss_and_gradients(model, problem, batch, step, workers)
                finite = np.isfinite(terms['total']) and all(np.all(np.isfinite(g)) for g in grads.values())
                if not finite:
                    logger.error(f"Non-finite loss or gradient in band {problem.band}, epoch {epoch}, step {step}")
                    raise TrainingDivergedError(problem.band, epoch, step, last_finite)
                last_finite = terms['total']

                params = optimizer.step(cls.band_parameters(model), grads)
                model = cls.normalize_band(cls.with_band_parameters(model, params), problem)
                rows.append({'epoch': epoch, 'step': step, 'band': problem.band, **terms})
                step += 1
            epoch_rows = [r['total'] for r in rows if r['epoch'] == epoch]
            logger.info(f"Band {problem.band} epoch {epoch}: mean loss {np.mean(epoch_rows):.4f}")
        return model, rows

    @classmethod
    def train(cls, dataset, config, workers=None):
        """
        Train one network per octave band on ``dataset`` (receiver positions,
        a source position, RIRs and the per-group decay times of every band).
        """
        workers = workers or settings.GFDN_NUM_THREADS
        fs = dataset.sample_rate
        t60_table = np.asarray(dataset.t60_table, dtype=float)
        if t60_table.shape != (config.num_groups, config.num_bands):
            raise ValidationError(
                f'Decay-time table {t60_table.shape} does not match {config.num_groups} groups x '
                f'{config.num_bands} bands'
            )
        if len(dataset.rirs) == 0:
            raise ValidationError('Cannot train on an empty dataset')

        bank = FilterBankService.design_bank(fs, config.num_bands, config.fir_order, config.band_base_hz)
        num_points = TransferService.choose_Q(float(t60_table.max()), fs)
        delays = config.delay_lengths
        if delays is None:
            delays = GFDNService.default_delay_lengths(
                config.num_groups * config.delays_per_group, fs, seed=config.seed, delay_range_s=config.delay_range_s
            )
        topology = GroupTopology(config.num_groups, config.delays_per_group, delays)
        references = cls.fit_length(dataset.rirs, num_points)
        logger.info(f"Training {config.num_bands} bands of {topology} on {len(references)} positions, Q = {num_points}")

        bands, initial, rows = [], [], []
        for band in range(config.num_bands):
            gains = np.atleast_1d(GFDNService.t60_to_absorption_gain(t60_table[:, band], 1, fs))
            problem = cls.band_problem(band, references, dataset.receiver_positions, dataset.source_position,
                                       bank, topology, gains, num_points, config)
            model = cls.initialize_band(config, topology, bank.center_freqs[band], band)
            initial.append(model)
            model, history = cls.train_band(model, problem, config, workers)
            bands.append(model)
            rows.extend(history)

        return TrainingResult(
            config=config,
            sample_rate=fs,
            topology=topology,
            t60_table=t60_table,
            center_freqs=bank.center_freqs,
            num_points=num_points,
            bands=bands,
            initial_bands=initial,
            source_position=np.asarray(dataset.source_position, dtype=float),
            history=pd.DataFrame(rows, columns=['epoch', 'step', 'band', 'total', 'edc', 'edr', 'spectral', 'sparsity']),
        )

    @classmethod
    def position_gains(cls, result, band, receiver, initial=False):
        """(source gains, receiver gains) of one band at a receiver position"""
        model = (result.initial_bands if initial else result.bands)[band]
        encoder = result.config.encoder
        g_o = cls.mlp_forward(cls.encode_position(receiver, encoder), model.mlp)
        if result.config.learn_source_gains:
            g_i = cls.mlp_forward(cls.encode_position(result.source_position, encoder), model.mlp)
        else:
            g_i = np.ones_like(g_o)
        return g_i, g_o

    @classmethod
    def network_for_position(cls, result, band, receiver, initial=False):
        g_i, g_o = cls.position_gains(result, band, receiver, initial)
        return result.band_params(band, initial).with_position_gains(g_i, g_o)

    @classmethod
    def predict_band_rirs(cls, result, receiver, initial=False, bank=None):
        """Band-filtered predictions at one receiver, shape (B, Q + order), as seen by the losses"""
        config = result.config
        bank = bank or FilterBankService.design_bank(result.sample_rate, config.num_bands, config.fir_order,
                                                     config.band_base_hz)
        q = result.num_points
        angles = 2.0 * np.pi * np.arange(q // 2 + 1) / q
        out = []
        for band in range(len(result.bands)):
            g_i, g_o = cls.position_gains(result, band, receiver, initial)
            responses = TransferService.eval_group_responses(result.band_params(band, initial), angles)
            h = np.fft.irfft((g_i * g_o) @ responses, n=q)
            out.append(FilterBankService.split_band(h, bank, band))
        return np.stack(out)

    @staticmethod
    def check_gradients(objective, params, num_checks=20, step=1e-4, rng=None, floor=1e-6, entries=None):
        """
        Compare reverse-mode gradients against five-point central differences
        on randomly chosen entries. ``entries`` restricts the draw to a list of
        (name, flat index) pairs. Returns one row per checked entry with the
        relative error |analytic - numeric| / max(|analytic|, |numeric|, floor).
        """
        rng = rng or np.random.default_rng(0)
        _, grads = objective(params)
        if entries is None:
            entries = [(name, i) for name in params for i in range(np.size(params[name]))]
        picks = rng.choice(len(entries), size=min(num_checks, len(entries)), replace=False)

        rows = []
        for pick in sorted(picks):
            name, i = entries[pick]
            h = step * max(1.0, abs(float(np.ravel(params[name])[i])))
            shifted = {}
            for k in (-2, -1, 1, 2):
                trial = {key: np.array(value, dtype=float) for key, value in params.items()}
                trial[name].flat[i] += k * h
                shifted[k] = objective(trial)[0]
            numeric = (shifted[-2] - 8.0 * shifted[-1] + 8.0 * shifted[1] - shifted[2]) / (12.0 * h)
            analytic = float(np.ravel(grads[name])[i])
            error = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            rows.append({'parameter': name, 'index': i, 'analytic': analytic, 'numeric': numeric,
                         'relative_error': error})
        return pd.DataFrame(rows)
