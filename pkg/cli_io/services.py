"""
Service layer for dataset and checkpoint files and for the evaluation tables
written by the management commands.
"""
import json
import logging
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import pandas as pd
import soundfile as sf
from django.core.exceptions import ValidationError

from analysis.services import AnalysisExportService, DecayAnalysisService
from autodiff_train.models import (
    BandModel, FourierEncoder, LossWeights, PerBandMLP, TrainingConfig, TrainingResult,
)
from autodiff_train.services import TrainingService
from common_slopes.models import DecayModel, RoomSpec
from common_slopes.services import CommonSlopesService
from filterbank.services import FilterBankService
from gfdn_core.models import GroupTopology

from .config import RunConfig
from .models import DatasetSplit, RIRDataset

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
CHECKPOINT_VERSION = 1
POSITION_DECIMALS = 9


def _json_dump(path, document):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(document, indent=2, sort_keys=True), encoding='utf-8')
    return path


class DatasetService:
    """Service for dataset manifests, their WAV payloads and train/test splits"""

    @staticmethod
    def save_dataset(dataset, directory, config_hash=''):
        """
        Write one float32 WAV per receiver under ``directory/rirs`` and a
        manifest referencing them by relative path. A ground-truth decay
        model is written next to the manifest.
        """
        directory = Path(directory)
        (directory / 'rirs').mkdir(parents=True, exist_ok=True)
        receivers = []
        for p, (position, h) in enumerate(zip(dataset.receiver_positions, dataset.rirs)):
            name = f'rirs/r{p:05d}.wav'
            sf.write(directory / name, h.astype(np.float32), int(dataset.sample_rate), subtype='FLOAT')
            receivers.append({'position': position.tolist(), 'file': name})

        manifest = {
            'version': MANIFEST_VERSION,
            'sample_rate': dataset.sample_rate,
            'source_position': dataset.source_position.tolist(),
            'receivers': receivers,
            't60_table': None if dataset.t60_table is None else dataset.t60_table.tolist(),
            'band_centers': None if dataset.band_centers is None else dataset.band_centers.tolist(),
            'split': None if dataset.split is None else dataset.split.to_dict(),
            'metadata': dataset.metadata,
            'config_hash': config_hash,
        }
        if dataset.ground_truth is not None:
            _json_dump(directory / 'ground_truth.json', {**dataset.ground_truth.to_dict(), 'config_hash': config_hash})
            manifest['ground_truth'] = 'ground_truth.json'
        path = _json_dump(directory / 'manifest.json', manifest)
        logger.info(f"Saved {dataset} to {path}")
        return path

    @staticmethod
    def _read_manifest(path):
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f'Manifest {path} does not exist')
        try:
            manifest = json.loads(path.read_text(encoding='utf-8'))
        except json.JSONDecodeError as exc:
            raise ValidationError(f'Manifest {path} is not valid JSON: {exc}')
        if not isinstance(manifest, dict):
            raise ValidationError(f'Manifest {path} must hold a JSON object')
        missing = [key for key in ('sample_rate', 'source_position', 'receivers') if key not in manifest]
        if missing:
            raise ValidationError([f'Manifest {path} is missing {key!r}' for key in missing])
        if manifest.get('version', MANIFEST_VERSION) != MANIFEST_VERSION:
            raise ValidationError(f'Manifest version {manifest["version"]} is not supported')
        return manifest

    @staticmethod
    def _read_receiver(root, index, entry, fs):
        """Position and samples of one manifest entry; problems are raised together"""
        errors = []
        try:
            position = np.asarray(entry['position'], dtype=float)
            if position.shape != (3,) or not np.all(np.isfinite(position)):
                errors.append(f'Receiver {index}: position must be three finite numbers, got {entry["position"]}')
        except (KeyError, TypeError, ValueError):
            errors.append(f'Receiver {index}: missing or malformed position')
            position = None

        samples = None
        name = entry.get('file') if isinstance(entry, dict) else None
        if not name:
            errors.append(f'Receiver {index}: no audio file given')
        elif not (root / name).is_file():
            errors.append(f'Receiver {index}: missing file {name}')
        else:
            try:
                samples, rate = sf.read(root / name, dtype='float32', always_2d=True)
            except (RuntimeError, sf.LibsndfileError) as exc:
                errors.append(f'Receiver {index}: unreadable file {name} ({exc})')
            else:
                if rate != fs:
                    errors.append(f'Receiver {index}: {name} has sample rate {rate}, expected {fs:g}')
                if samples.shape[1] != 1:
                    errors.append(f'Receiver {index}: {name} has {samples.shape[1]} channels, expected 1')
                samples = samples[:, 0]
        if errors:
            raise ValidationError(errors)
        return position, samples

    @classmethod
    def load_dataset(cls, manifest_path):
        """
        Validated dataset from a manifest. Every problem with every entry is
        collected into one error. Entries at an already listed position are
        dropped, keeping the first.
        """
        manifest_path = Path(manifest_path)
        manifest = cls._read_manifest(manifest_path)
        root = manifest_path.parent
        fs = float(manifest['sample_rate'])
        entries = manifest['receivers']
        if not isinstance(entries, list) or not entries:
            raise ValidationError(f'Manifest {manifest_path} lists no receivers')

        errors, positions, rirs = [], [], []
        for index, entry in enumerate(entries):
            try:
                position, samples = cls._read_receiver(root, index, entry if isinstance(entry, dict) else {}, fs)
            except ValidationError as exc:
                errors.extend(exc.messages)
                continue
            positions.append(position)
            rirs.append(samples)
        if errors:
            raise ValidationError(errors)

        keep = cls.first_unique(np.array(positions))
        if keep.size < len(positions):
            logger.warning(f"Dropped {len(positions) - keep.size} receivers at duplicate positions")
        length = max(rir.size for rir in rirs)
        if any(rir.size != length for rir in rirs):
            logger.warning(f"RIR lengths differ; zero-padding all to {length} samples")
        padded = np.zeros((len(rirs), length))
        for p, rir in enumerate(rirs):
            padded[p, :rir.size] = rir

        split = manifest.get('split')
        if split is not None and keep.size < len(positions):
            logger.warning('The stored split refers to removed duplicates and is discarded')
            split = None

        ground_truth = None
        if manifest.get('ground_truth'):
            truth_path = root / manifest['ground_truth']
            if not truth_path.is_file():
                raise ValidationError(f'Ground-truth model {truth_path} does not exist')
            ground_truth = DecayModel.from_dict(json.loads(truth_path.read_text(encoding='utf-8')))

        dataset = RIRDataset(
            sample_rate=fs,
            source_position=manifest['source_position'],
            receiver_positions=np.array(positions)[keep],
            rirs=padded[keep],
            t60_table=manifest.get('t60_table'),
            band_centers=manifest.get('band_centers'),
            split=None if split is None else DatasetSplit(**split),
            ground_truth=ground_truth,
            metadata=dict(manifest.get('metadata') or {}, config_hash=manifest.get('config_hash', '')),
        )
        logger.info(f"Loaded {dataset} from {manifest_path}")
        return dataset

    @staticmethod
    def first_unique(positions):
        """Indices of the first occurrence of every distinct position, in input order"""
        rounded = np.round(np.atleast_2d(positions), POSITION_DECIMALS)
        _, first = np.unique(rounded, axis=0, return_index=True)
        return np.sort(first)

    @staticmethod
    def default_room(config):
        """Two coupled volumes: the shortest decay dominates near the source, the longest beyond the boundary"""
        g, b = config.num_groups, config.num_bands
        t60s = np.geomspace(0.4, 1.6, g) if g > 1 else np.array([0.8])
        near = np.full((g, b), 0.05)
        far = np.full((g, b), 0.05)
        near[0], far[-1] = 1.0, 1.0
        return RoomSpec(
            t60_table=np.outer(t60s, np.ones(b)),
            band_centers=config.band_centers,
            sample_rate=config.sample_rate,
            near_amplitudes=near,
            far_amplitudes=far,
            transition_width=0.05,
            rir_length_s=1.2 * float(t60s.max()),
        )

    @staticmethod
    def load_room(path, config):
        values = RunConfig.read_file(path)
        try:
            room = RoomSpec(sample_rate=config.sample_rate, band_centers=config.band_centers, **values)
        except TypeError as exc:
            raise ValidationError(f'Room file {path} is malformed: {exc}')
        expected = (config.num_groups, config.num_bands)
        if room.t60_table.shape != expected:
            raise ValidationError(f'Room decay-time table {room.t60_table.shape} does not match {expected} '
                                  f'(groups x bands)')
        return room

    @staticmethod
    def make_split(dataset, fraction, seed):
        """Dataset with a seeded random split, round(fraction * P) positions for training"""
        if not 0.0 < fraction <= 1.0:
            raise ValidationError(f'Split fraction must lie in (0, 1], got {fraction}')
        order = np.random.default_rng(seed).permutation(dataset.num_positions)
        num_train = max(1, int(round(fraction * dataset.num_positions)))
        split = DatasetSplit(np.sort(order[:num_train]), np.sort(order[num_train:]), fraction, seed)
        return replace(dataset, split=split)


class CheckpointService:
    """Service for versioned JSON checkpoints of trained subband models"""

    @staticmethod
    def _band_to_dict(model):
        return {
            'center_hz': model.center_hz,
            'generators': np.asarray(model.generators).tolist(),
            'input_gains': np.asarray(model.input_gains).tolist(),
            'output_gains': np.asarray(model.output_gains).tolist(),
            'mlp': {
                'input_dim': model.mlp.input_dim,
                'hidden_layers': model.mlp.hidden_layers,
                'width': model.mlp.width,
                'output_dim': model.mlp.output_dim,
                'parameters': {name: np.asarray(value).tolist() for name, value in model.mlp.parameters.items()},
            },
        }

    @staticmethod
    def _band_from_dict(data):
        mlp = data['mlp']
        return BandModel(
            center_hz=float(data['center_hz']),
            generators=np.array(data['generators'], dtype=float),
            input_gains=np.array(data['input_gains'], dtype=float),
            output_gains=np.array(data['output_gains'], dtype=float),
            mlp=PerBandMLP(
                int(mlp['input_dim']), int(mlp['hidden_layers']), int(mlp['width']), int(mlp['output_dim']),
                {name: np.array(value, dtype=float) for name, value in mlp['parameters'].items()},
            ),
        )

    @staticmethod
    def _config_from_dict(data):
        return TrainingConfig(**{
            **data,
            'delay_range_s': tuple(data['delay_range_s']),
            'encoder': FourierEncoder(**data['encoder']),
            'mlp_schedule': tuple(tuple(row) for row in data['mlp_schedule']),
            'loss_weights': LossWeights(**data['loss_weights']),
            'betas': tuple(data['betas']),
            'delay_lengths': None if data['delay_lengths'] is None else tuple(data['delay_lengths']),
        })

    @classmethod
    def to_dict(cls, result, config_hash='', split=None):
        config = asdict(result.config)
        if config['delay_lengths'] is not None:
            config['delay_lengths'] = [int(m) for m in config['delay_lengths']]
        return {
            'version': CHECKPOINT_VERSION,
            'config_hash': config_hash,
            'config': config,
            'sample_rate': result.sample_rate,
            'topology': {
                'num_groups': result.topology.num_groups,
                'delays_per_group': result.topology.delays_per_group,
                'delay_lengths': result.topology.delay_lengths.tolist(),
            },
            't60_table': np.asarray(result.t60_table).tolist(),
            'center_freqs': np.asarray(result.center_freqs).tolist(),
            'num_points': int(result.num_points),
            'source_position': np.asarray(result.source_position).tolist(),
            'bands': [cls._band_to_dict(model) for model in result.bands],
            'initial_bands': [cls._band_to_dict(model) for model in result.initial_bands],
            'split': None if split is None else split.to_dict(),
        }

    @classmethod
    def save(cls, result, path, config_hash='', split=None):
        path = _json_dump(path, cls.to_dict(result, config_hash, split))
        logger.info(f"Saved checkpoint of {len(result.bands)} bands to {path}")
        return path

    @classmethod
    def load(cls, path):
        """(TrainingResult, config hash, DatasetSplit or None) from a checkpoint file"""
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f'Checkpoint {path} does not exist')
        try:
            data = json.loads(path.read_text(encoding='utf-8'))
        except json.JSONDecodeError as exc:
            raise ValidationError(f'Checkpoint {path} is not valid JSON: {exc}')
        if data.get('version') != CHECKPOINT_VERSION:
            raise ValidationError(f'Checkpoint version {data.get("version")} is not supported')
        try:
            topology = data['topology']
            result = TrainingResult(
                config=cls._config_from_dict(data['config']),
                sample_rate=float(data['sample_rate']),
                topology=GroupTopology(topology['num_groups'], topology['delays_per_group'], topology['delay_lengths']),
                t60_table=np.array(data['t60_table'], dtype=float),
                center_freqs=np.array(data['center_freqs'], dtype=float),
                num_points=int(data['num_points']),
                bands=[cls._band_from_dict(band) for band in data['bands']],
                initial_bands=[cls._band_from_dict(band) for band in data['initial_bands']],
                source_position=np.array(data['source_position'], dtype=float),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f'Checkpoint {path} is malformed: {exc}')
        split = data.get('split')
        return result, data.get('config_hash', ''), None if split is None else DatasetSplit(**split)

    @staticmethod
    def write_history(result, path, config_hash=''):
        return AnalysisExportService.write_csv(path, result.history, config_hash)


class EvaluationService:
    """Band EDC and EDR errors of trained networks and of the common-slopes model"""

    @staticmethod
    def analysis_bank(result):
        config = result.config
        return FilterBankService.design_bank(result.sample_rate, config.num_bands, config.fir_order,
                                             config.band_base_hz)

    @staticmethod
    def reference_bands(rirs, bank, num_points):
        """Band-filtered references truncated to the network length, shape (P, B, Q + order)"""
        references = TrainingService.fit_length(rirs, num_points)
        return np.stack([
            np.stack([FilterBankService.split_band(h, bank, b) for b in range(bank.num_bands)])
            for h in references
        ])

    @staticmethod
    def band_errors(reference, estimate, fs, window, hop):
        """(EDC error dB, EDR error dB) of one pair of band signals"""
        edc_error = DecayAnalysisService.edc_error_db(DecayAnalysisService.edc(reference),
                                                      DecayAnalysisService.edc(estimate))
        edr_error = DecayAnalysisService.edr_error(reference, estimate, fs, window, hop)
        return edc_error, edr_error

    @classmethod
    def error_table(cls, references, estimates, fs, window, hop, positions, method, split_labels=None):
        """Long-format rows of position, band, method, split and both errors"""
        rows = []
        for p, (reference, estimate) in enumerate(zip(references, estimates)):
            for b, (ref_band, est_band) in enumerate(zip(reference, estimate)):
                edc_error, edr_error = cls.band_errors(ref_band, est_band, fs, window, hop)
                rows.append({
                    'position': int(positions[p]),
                    'band': b,
                    'method': method,
                    'split': '' if split_labels is None else split_labels[p],
                    'edc_error_db': edc_error,
                    'edr_error_db': edr_error,
                })
        return pd.DataFrame(rows)

    @staticmethod
    def split_labels(num_positions, split):
        labels = np.full(num_positions, 'all', dtype=object)
        if split is not None:
            labels[split.train] = 'train'
            labels[split.test] = 'test'
        return labels

    @classmethod
    def evaluate_network(cls, result, dataset, split=None, bank=None):
        bank = bank or cls.analysis_bank(result)
        window, hop = TrainingService.stft_shape(result.sample_rate, result.config)
        references = cls.reference_bands(dataset.rirs, bank, result.num_points)
        estimates = [TrainingService.predict_band_rirs(result, x, bank=bank) for x in dataset.receiver_positions]
        return cls.error_table(references, estimates, result.sample_rate, window, hop,
                               np.arange(dataset.num_positions), 'gfdn',
                               cls.split_labels(dataset.num_positions, split))

    @classmethod
    def evaluate_common_slopes(cls, result, dataset, rng, split=None, bank=None):
        """Fit the decay model on ``dataset``, synthesize every position and score it like the networks"""
        bank = bank or cls.analysis_bank(result)
        window, hop = TrainingService.stft_shape(result.sample_rate, result.config)
        model = CommonSlopesService.fit_dataset(dataset, bank, t60_table=result.t60_table)
        synthesized = np.stack([
            CommonSlopesService.cs_synthesize_rir(model, x, dataset.num_samples, rng, bank)
            for x in dataset.receiver_positions
        ])
        references = cls.reference_bands(dataset.rirs, bank, result.num_points)
        estimates = cls.reference_bands(synthesized, bank, result.num_points)
        return cls.error_table(references, estimates, result.sample_rate, window, hop,
                               np.arange(dataset.num_positions), 'common_slopes',
                               cls.split_labels(dataset.num_positions, split)), model

    @staticmethod
    def summarize(frame):
        """RMSE of both errors per band, per position and overall"""
        return {
            metric: AnalysisExportService.summarize(frame.rename(columns={column: 'error_db'}))
            for metric, column in (('edc', 'edc_error_db'), ('edr', 'edr_error_db'))
        }

    @staticmethod
    def comparison_table(frame, center_freqs):
        """Side-by-side RMSE per band and method"""
        rmse = lambda s: float(np.sqrt(np.mean(np.square(s))))
        table = frame.groupby(['band', 'method']).agg(
            edc_rmse_db=('edc_error_db', rmse),
            edr_rmse_db=('edr_error_db', rmse),
        ).reset_index()
        table.insert(1, 'center_hz', np.asarray(center_freqs)[table['band']])
        return table

    @staticmethod
    def broadband_prediction(result, x, bank):
        """Sum of the band predictions with the bank delay removed, Q samples"""
        bands = TrainingService.predict_band_rirs(result, x, bank=bank)
        delay = bank.group_delay
        return bands.sum(axis=0)[delay:delay + result.num_points]
