"""
Tests for dataset manifests, WAV payloads and train/test splits.
"""
import json

import numpy as np
import pytest
import soundfile as sf
from django.core.exceptions import ValidationError

from cli_io.models import DatasetSplit, RIRDataset
from cli_io.services import DatasetService
from common_slopes.models import GridSpec, RoomSpec
from common_slopes.services import CommonSlopesService
from filterbank.services import FilterBankService


def write_manifest(directory, receivers, sample_rate=8000, **extra):
    document = {'sample_rate': sample_rate, 'source_position': [0.2, 0.2, 1.5], 'receivers': receivers, **extra}
    path = directory / 'manifest.json'
    path.write_text(json.dumps(document), encoding='utf-8')
    return path


def write_wav(directory, name, samples, sample_rate=8000):
    (directory / name).parent.mkdir(parents=True, exist_ok=True)
    sf.write(directory / name, np.asarray(samples, dtype=np.float32), sample_rate, subtype='FLOAT')
    return name


class TestDatasetRoundTrip:
    """Test datasets survive save and load"""

    def test_float32_payloads(self, make_dataset, tmp_path):
        """Test samples, positions and tables round-trip exactly at float32 precision"""
        dataset = make_dataset(t60_table=[[0.03, 0.02]], band_centers=[500.0, 1000.0])
        dataset = DatasetService.make_split(dataset, 0.8, seed=3)
        manifest = DatasetService.save_dataset(dataset, tmp_path / 'data', config_hash='abc')
        loaded = DatasetService.load_dataset(manifest)

        np.testing.assert_array_equal(loaded.rirs, dataset.rirs.astype(np.float32))
        np.testing.assert_array_equal(loaded.receiver_positions, dataset.receiver_positions)
        np.testing.assert_array_equal(loaded.t60_table, dataset.t60_table)
        np.testing.assert_array_equal(loaded.split.train, dataset.split.train)
        assert loaded.metadata['config_hash'] == 'abc'

    def test_synthetic_grid_dataset(self, tmp_path):
        """Test a 64-position synthetic dataset and its ground truth round-trip bit-exactly"""
        room = RoomSpec(
            t60_table=[[0.05], [0.2]],
            band_centers=[1000.0],
            sample_rate=8000,
            near_amplitudes=[[1.0], [0.05]],
            far_amplitudes=[[0.1], [0.5]],
            rir_length_s=0.25,
        )
        bank = FilterBankService.design_bank(8000, 1, fir_order=2, base_hz=1000.0)
        dataset = CommonSlopesService.make_synthetic_dataset(
            room, GridSpec((0.0, 1.0), (0.0, 1.0), 8, 8), np.random.default_rng(0), bank
        )
        dataset = RIRDataset(**{**vars(dataset), 'rirs': dataset.rirs.astype(np.float32)})

        manifest = DatasetService.save_dataset(dataset, tmp_path / 'grid')
        loaded = DatasetService.load_dataset(manifest)
        assert loaded.num_positions == 64
        np.testing.assert_array_equal(loaded.rirs, dataset.rirs)
        np.testing.assert_array_equal(loaded.ground_truth.amplitudes, dataset.ground_truth.amplitudes)

        again = DatasetService.load_dataset(DatasetService.save_dataset(loaded, tmp_path / 'again'))
        np.testing.assert_array_equal(again.rirs, loaded.rirs)


class TestLoadDataset:
    """Test validation while loading manifests"""

    def test_empty_receiver_list(self, tmp_path):
        """Test a manifest without receivers is refused"""
        with pytest.raises(ValidationError, match='no receivers'):
            DatasetService.load_dataset(write_manifest(tmp_path, []))

    def test_duplicates_keep_first(self, tmp_path):
        """Test repeated positions keep their first entry"""
        receivers = [
            {'position': [1.0, 1.0, 1.5], 'file': write_wav(tmp_path, 'a.wav', [1.0, 0.5])},
            {'position': [2.0, 1.0, 1.5], 'file': write_wav(tmp_path, 'b.wav', [0.25, 0.125])},
            {'position': [1.0, 1.0, 1.5], 'file': write_wav(tmp_path, 'c.wav', [-1.0, -0.5])},
        ]
        dataset = DatasetService.load_dataset(write_manifest(tmp_path, receivers))
        assert dataset.num_positions == 2
        np.testing.assert_array_equal(dataset.rirs[0], [1.0, 0.5])
        np.testing.assert_array_equal(dataset.receiver_positions[1], [2.0, 1.0, 1.5])

    def test_errors_are_collected(self, tmp_path):
        """Test a missing file, a rate mismatch and a bad position are all reported"""
        receivers = [
            {'position': [1.0, 1.0, 1.5], 'file': 'absent.wav'},
            {'position': [2.0, 1.0, 1.5], 'file': write_wav(tmp_path, 'slow.wav', [1.0, 0.5], sample_rate=16000)},
            {'position': [1.0, 1.0], 'file': write_wav(tmp_path, 'ok.wav', [1.0, 0.5])},
        ]
        with pytest.raises(ValidationError) as excinfo:
            DatasetService.load_dataset(write_manifest(tmp_path, receivers))
        messages = excinfo.value.messages
        assert len(messages) == 3
        assert 'Receiver 0: missing file absent.wav' in messages
        assert any(m.startswith('Receiver 1') and '16000' in m for m in messages)
        assert any(m.startswith('Receiver 2') and 'position' in m for m in messages)

    def test_multichannel_file(self, tmp_path):
        """Test RIRs must be mono"""
        path = tmp_path / 'stereo.wav'
        sf.write(path, np.ones((4, 2), dtype=np.float32), 8000, subtype='FLOAT')
        with pytest.raises(ValidationError, match='channels'):
            DatasetService.load_dataset(write_manifest(tmp_path, [{'position': [1, 1, 1], 'file': 'stereo.wav'}]))

    def test_malformed_json(self, tmp_path):
        """Test a broken manifest names the JSON problem"""
        path = tmp_path / 'manifest.json'
        path.write_text('{"receivers": [', encoding='utf-8')
        with pytest.raises(ValidationError, match='not valid JSON'):
            DatasetService.load_dataset(path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ValidationError, match='does not exist'):
            DatasetService.load_dataset(tmp_path / 'manifest.json')

    def test_unequal_lengths_are_padded(self, tmp_path):
        """Test shorter RIRs are zero-padded to the longest"""
        receivers = [
            {'position': [1.0, 1.0, 1.5], 'file': write_wav(tmp_path, 'a.wav', [1.0, 0.5, 0.25])},
            {'position': [2.0, 1.0, 1.5], 'file': write_wav(tmp_path, 'b.wav', [1.0])},
        ]
        dataset = DatasetService.load_dataset(write_manifest(tmp_path, receivers))
        np.testing.assert_array_equal(dataset.rirs[1], [1.0, 0.0, 0.0])


class TestSplits:
    """Test train/test partitions"""

    def test_fraction_and_partition(self, make_dataset):
        """Test the split partitions all positions with round(f * P) for training"""
        dataset = DatasetService.make_split(make_dataset(num_positions=10), 0.8, seed=1)
        assert dataset.split.train.size == 8
        assert sorted(np.concatenate([dataset.split.train, dataset.split.test]).tolist()) == list(range(10))
        assert dataset.train_set().num_positions == 8
        assert dataset.test_set().num_positions == 2

    def test_seeded(self, make_dataset):
        """Test equal seeds give equal splits"""
        dataset = make_dataset(num_positions=10)
        first = DatasetService.make_split(dataset, 0.5, seed=7).split
        second = DatasetService.make_split(dataset, 0.5, seed=7).split
        np.testing.assert_array_equal(first.train, second.train)

    def test_invalid_partition(self, make_dataset):
        """Test overlapping index sets are refused"""
        with pytest.raises(ValidationError, match='partition'):
            make_dataset(num_positions=4, split=DatasetSplit([0, 1, 2], [2], 0.75, 0))

    def test_fraction_mismatch(self, make_dataset):
        """Test the training size must match the fraction within one position"""
        with pytest.raises(ValidationError):
            make_dataset(num_positions=4, split=DatasetSplit([0], [1, 2, 3], 0.75, 0))

    def test_missing_split(self, make_dataset):
        with pytest.raises(ValidationError):
            make_dataset().train_set()

    def test_empty_receivers(self):
        """Test a dataset needs at least one receiver"""
        with pytest.raises(ValidationError):
            RIRDataset(8000, [0, 0, 0], np.zeros((0, 3)), np.zeros((0, 10)))
