import logging
from dataclasses import replace

from django.core.exceptions import ValidationError

from autodiff_train.services import TrainingService
from cli_io.management.base import GFDNCommand
from cli_io.services import CheckpointService, DatasetService
from common_slopes.services import CommonSlopesService
from filterbank.services import FilterBankService

logger = logging.getLogger(__name__)


class Command(GFDNCommand):
    help = 'Train one grouped network per octave band on the training split of a dataset'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--dataset', required=True, help='Dataset manifest')
        parser.add_argument('--epochs', type=int, help='Override the configured epoch count')
        parser.add_argument('--batch-size', type=int, help='Override the configured batch size')
        parser.add_argument('--output', help='Run directory for the checkpoint and loss history')

    def run(self, **options):
        config = self.load_config(options, epochs=options['epochs'], batch_size=options['batch_size'])
        dataset = DatasetService.load_dataset(options['dataset'])
        if dataset.sample_rate != config.sample_rate:
            raise ValidationError(
                f'Dataset sample rate {dataset.sample_rate:g} Hz differs from the configured {config.sample_rate:g} Hz'
            )

        if dataset.t60_table is None:
            bank = FilterBankService.design_bank(config.sample_rate, config.num_bands, config.fir_order,
                                                 config.band_base_hz)
            model = CommonSlopesService.fit_dataset(dataset, bank, num_slopes=config.num_groups)
            logger.info(f"Dataset has no decay times; fitted {model.t60_table.tolist()}")
            dataset = replace(dataset, t60_table=model.t60_table, band_centers=model.band_centers)
        if dataset.split is None:
            dataset = DatasetService.make_split(dataset, config.split_fraction, config.seed)

        result = TrainingService.train(dataset.train_set(), config.training_config(), self.workers(options))

        directory = self.output_dir(options, 'train')
        config_hash = config.config_hash()
        config.write(directory / 'config.json')
        checkpoint = CheckpointService.save(result, directory / 'checkpoint.json', config_hash, dataset.split)
        CheckpointService.write_history(result, directory / 'loss_history.csv', config_hash)

        if len(result.history):
            last = result.history.groupby('band').tail(1)
            for row in last.itertuples():
                self.stdout.write(f'band {row.band}: total loss {row.total:.4g}')
        self.stdout.write(f'Checkpoint written to {checkpoint}')
