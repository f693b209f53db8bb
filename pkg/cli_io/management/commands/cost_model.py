from dataclasses import fields

from analysis.services import AnalysisExportService
from cli_io.management.base import GFDNCommand
from common_slopes.models import CostModelInput
from common_slopes.services import CostModelService

HELP = {
    'B': 'octave bands',
    'N': 'delay lines per network',
    'N_group': "delay lines per group (N')",
    'G': 'groups, equal to the number of slopes',
    'P': 'operations per delay-line filter',
    'Q_ops': 'operations per delay-line gain filter',
    'M_b': 'modes per band',
    'M': 'modes per slope of the modal renderer',
    'A': 'MLP width',
    'N_layer': 'hidden MLP layers',
    'F': 'MLP outputs',
    'tau': 'mean delay length in samples',
}


class Command(GFDNCommand):
    help = 'Print per-sample operation counts and the memory footprint of the renderers'

    uses_config = False

    def add_arguments(self, parser):
        super().add_arguments(parser)
        for f in fields(CostModelInput):
            parser.add_argument(f'--{f.name}', dest=f.name, type=int, default=f.default, help=HELP[f.name])
        parser.add_argument('--csv', help='Also write the table as CSV')

    def run(self, **options):
        inputs = CostModelInput(**{f.name: options[f.name] for f in fields(CostModelInput)})
        table = CostModelService.cost_table(inputs)
        if options['csv']:
            AnalysisExportService.write_csv(options['csv'], table, inputs.config_hash())
        self.stdout.write(table.to_string(index=False))
