from pathlib import Path

from django.core.exceptions import ValidationError

from analysis.services import AnalysisExportService, DecayAnalysisService
from autodiff_train.services import TrainingService
from cli_io.management.base import GFDNCommand
from cli_io.services import CheckpointService, DatasetService, EvaluationService


class Command(GFDNCommand):
    help = 'Band EDC and EDR errors of a trained model against a reference dataset, with decay curves'

    uses_config = False

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--checkpoint', required=True)
        parser.add_argument('--dataset', required=True, help='Reference dataset manifest')
        parser.add_argument('--position', type=int, default=0, help='Receiver index whose curves are exported')
        parser.add_argument('--output', required=True, help='Directory for the CSV and JSON outputs')

    def run(self, **options):
        result, config_hash, split = CheckpointService.load(options['checkpoint'])
        dataset = DatasetService.load_dataset(options['dataset'])
        if dataset.sample_rate != result.sample_rate:
            raise ValidationError(
                f'Dataset sample rate {dataset.sample_rate:g} Hz differs from the model\'s {result.sample_rate:g} Hz'
            )
        if split is not None and split.train.size + split.test.size != dataset.num_positions:
            raise ValidationError(f'The checkpoint split covers {split.train.size + split.test.size} positions, '
                                  f'the dataset has {dataset.num_positions}')
        index = options['position']
        if not 0 <= index < dataset.num_positions:
            raise ValidationError(f'Position index {index} is out of range for {dataset.num_positions} receivers')

        bank = EvaluationService.analysis_bank(result)
        errors = EvaluationService.evaluate_network(result, dataset, split, bank)
        directory = Path(options['output'])
        AnalysisExportService.write_csv(directory / 'errors.csv', errors, config_hash)

        summary = {'all': EvaluationService.summarize(errors)}
        for label in ('train', 'test'):
            subset = errors[errors['split'] == label]
            if len(subset):
                summary[label] = EvaluationService.summarize(subset)
        AnalysisExportService.write_json(directory / 'summary.json', summary, config_hash)

        window, hop = TrainingService.stft_shape(result.sample_rate, result.config)
        x = dataset.receiver_positions[index]
        reference = TrainingService.fit_length(dataset.rirs[index], result.num_points)[0]
        prediction = EvaluationService.broadband_prediction(result, x, bank)
        for prefix, h in (('reference_', reference), ('gfdn_', prediction)):
            decay = DecayAnalysisService.analyze(h, result.sample_rate, window, hop)
            AnalysisExportService.write_decay_curves(directory, decay, prefix, config_hash)

        for label, block in summary.items():
            self.stdout.write(f'{label}: EDC RMSE {block["edc"]["overall"]:.3f} dB, '
                              f'EDR RMSE {block["edr"]["overall"]:.3f} dB')
