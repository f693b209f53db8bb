from pathlib import Path

import numpy as np
import pandas as pd
from django.core.exceptions import ValidationError

from analysis.services import AnalysisExportService
from cli_io.management.base import GFDNCommand
from cli_io.services import CheckpointService, DatasetService, EvaluationService


class Command(GFDNCommand):
    help = 'Fit the common-slopes model on a dataset and compare its band errors with a trained model'

    uses_config = False

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--checkpoint', required=True)
        parser.add_argument('--dataset', required=True, help='Reference dataset manifest')
        parser.add_argument('--seed', type=int, help='Noise seed of the synthesized RIRs (default: the run seed)')
        parser.add_argument('--output', required=True, help='Directory for the comparison tables')

    def run(self, **options):
        result, config_hash, split = CheckpointService.load(options['checkpoint'])
        dataset = DatasetService.load_dataset(options['dataset'])
        if dataset.sample_rate != result.sample_rate:
            raise ValidationError(
                f'Dataset sample rate {dataset.sample_rate:g} Hz differs from the model\'s {result.sample_rate:g} Hz'
            )
        if split is not None and split.train.size + split.test.size != dataset.num_positions:
            split = None

        seed = result.config.seed if options['seed'] is None else options['seed']
        bank = EvaluationService.analysis_bank(result)
        network_errors = EvaluationService.evaluate_network(result, dataset, split, bank)
        cs_errors, model = EvaluationService.evaluate_common_slopes(
            result, dataset, np.random.default_rng(seed), split, bank
        )
        errors = pd.concat([network_errors, cs_errors], ignore_index=True)
        table = EvaluationService.comparison_table(errors, result.center_freqs)

        directory = Path(options['output'])
        AnalysisExportService.write_csv(directory / 'errors.csv', errors, config_hash)
        AnalysisExportService.write_csv(directory / 'comparison.csv', table, config_hash)
        AnalysisExportService.write_json(directory / 'common_slopes_model.json', model.to_dict(), config_hash)
        self.stdout.write(table.to_string(index=False))
